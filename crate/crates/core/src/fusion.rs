//! Multi-task multi-scale query linear fusion block (MT-MQLFB).
//!
//! Task features are concatenated task-major; each scale branch builds
//! stride-2 depthwise-conv queries at its kernel size, every branch
//! attends the same pooled key/value context through linear attention,
//! and the per-scale outputs are concatenated, projected and passed
//! through a residual MLP to form the fused sequence.
//!
//! The shared context is built once per forward pass: it depends only on
//! keys and values, never on a query, so reuse across scales is exact.

use alloc::format;
use alloc::vec::Vec;

// float intrinsics in no_std builds; std test builds shadow it
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{invalid, Result};
use crate::layers::{BatchNorm, Dense, LayerNorm};
use crate::linear_attention::{self, ContextVars};
use crate::param::{ParamId, ParamStore};
use crate::rng::SeedRng;
use crate::tape::{Tape, Var};
use crate::tensor::{self, Real, Tensor};
use crate::Phase;

#[derive(Clone, Debug)]
pub struct FusionConfig {
    /// Task count T; every task feature is `d x h x w`.
    pub tasks: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    /// Depthwise kernel sizes, a nonempty subset of {1, 3, 5}.
    pub scales: Vec<usize>,
    pub heads: usize,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h % 2 != 0 || self.w % 2 != 0 {
            return Err(invalid("fusion_config", "h and w must be even"));
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !matches!(s, 1 | 3 | 5)) {
            return Err(invalid(
                "fusion_config",
                "scales must be a nonempty subset of {1,3,5}",
            ));
        }
        if self.tasks == 0 {
            return Err(invalid("fusion_config", "at least one task"));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(invalid("fusion_config", "heads must divide d"));
        }
        Ok(())
    }

    /// Tokens per task after the stride-2 reduction.
    pub fn tokens_per_task(&self) -> usize {
        self.h * self.w / 4
    }

    /// Fused sequence length `T * h * w / 4`.
    pub fn seq_len(&self) -> usize {
        self.tasks * self.tokens_per_task()
    }
}

/// One query scale: per-task depthwise conv + BN, then a shared LN and
/// query projection over the concatenated tokens.
pub struct ScaleBranch {
    pub s: usize,
    pub conv: Vec<ParamId>,
    pub bn: Vec<BatchNorm>,
    pub ln: LayerNorm,
    pub wq: ParamId,
}

pub struct FusionBlock {
    pub cfg: FusionConfig,
    pub ln_m: LayerNorm,
    pub wk: ParamId,
    pub wv: ParamId,
    pub branches: Vec<ScaleBranch>,
    pub wo: ParamId,
    pub mlp_fc1: Dense,
    pub mlp_fc2: Dense,
}

impl FusionBlock {
    pub fn new<T: Real>(
        cfg: FusionConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let proj_std = 1.0 / (d as f64).sqrt();
        let ln_m = LayerNorm::new(store, &format!("{prefix}.ln_m"), d)?;
        let wk = store.add_normal(&format!("{prefix}.wk"), &[d, d], proj_std, rng)?;
        let wv = store.add_normal(&format!("{prefix}.wv"), &[d, d], proj_std, rng)?;
        let mut branches = Vec::new();
        for &s in &cfg.scales {
            let mut conv = Vec::new();
            let mut bn = Vec::new();
            for t in 0..cfg.tasks {
                let std = (2.0 / (s * s) as f64).sqrt();
                conv.push(store.add_normal(
                    &format!("{prefix}.scale{s}.task{t}.conv"),
                    &[d, s, s],
                    std,
                    rng,
                )?);
                bn.push(BatchNorm::new(
                    store,
                    &format!("{prefix}.scale{s}.task{t}.bn"),
                    d,
                )?);
            }
            let ln = LayerNorm::new(store, &format!("{prefix}.scale{s}.ln"), d)?;
            let wq = store.add_normal(&format!("{prefix}.scale{s}.wq"), &[d, d], proj_std, rng)?;
            branches.push(ScaleBranch {
                s,
                conv,
                bn,
                ln,
                wq,
            });
        }
        let s_count = cfg.scales.len();
        let wo = store.add_normal(
            &format!("{prefix}.wo"),
            &[s_count * d, d],
            1.0 / ((s_count * d) as f64).sqrt(),
            rng,
        )?;
        let mlp_fc1 = Dense::new(store, &format!("{prefix}.mlp.fc1"), d, 4 * d, true, rng)?;
        let mlp_fc2 = Dense::new(store, &format!("{prefix}.mlp.fc2"), 4 * d, d, true, rng)?;
        Ok(FusionBlock {
            cfg,
            ln_m,
            wk,
            wv,
            branches,
            wo,
            mlp_fc1,
            mlp_fc2,
        })
    }

    fn check_features<T: Real>(&self, tape: &Tape<T>, features: &[Var]) -> Result<()> {
        if features.len() != self.cfg.tasks {
            return Err(invalid("fusion", "feature count != task count"));
        }
        for &f in features {
            let shape = tape.value(f).shape();
            if shape != [self.cfg.d, self.cfg.h, self.cfg.w] {
                return Err(invalid(
                    "fusion",
                    format!(
                        "task feature must be {:?}",
                        [self.cfg.d, self.cfg.h, self.cfg.w]
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Per-task depthwise conv (stride 2) + BN + ReLU, reshaped to tokens
    /// and concatenated task-major: `G_s`, `(T*h*w/4) x d`.
    pub fn build_scale_features<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        tape: &mut Tape<T>,
        features: &[Var],
        branch: usize,
        phase: Phase,
    ) -> Result<Var> {
        self.check_features(tape, features)?;
        let br = &self.branches[branch];
        let pad = (br.s - 1) / 2;
        let mut parts = Vec::with_capacity(features.len());
        for (t, &f) in features.iter().enumerate() {
            let k = tape.param(store, br.conv[t]);
            let c = tape.depthwise_conv2d(f, k, 2, pad)?;
            let n = br.bn[t].apply(store, tape, c, phase)?;
            let r = tape.relu(n);
            parts.push(tape.chw_to_tokens(r)?);
        }
        tape.concat_rows(&parts)
    }

    /// Pooled task-major token sequence `M` and its key/value
    /// projections.
    pub fn build_shared_kv<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        features: &[Var],
    ) -> Result<(Var, Var)> {
        self.check_features(tape, features)?;
        let mut parts = Vec::with_capacity(features.len());
        for &f in features {
            let p = tape.avg_pool2d(f, 2, 2)?;
            parts.push(tape.chw_to_tokens(p)?);
        }
        let m = tape.concat_rows(&parts)?;
        let mn = self.ln_m.apply(store, tape, m)?;
        let wk = tape.param(store, self.wk);
        let wv = tape.param(store, self.wv);
        let k = tape.matmul(mn, wk)?;
        let v = tape.matmul(mn, wv)?;
        Ok((k, v))
    }

    /// Builds the per-head shared context from projected keys/values.
    pub fn build_contexts<T: Real>(
        &self,
        tape: &mut Tape<T>,
        k: Var,
        v: Var,
    ) -> Result<Vec<ContextVars>> {
        let dh = self.cfg.d / self.cfg.heads;
        let mut ctxs = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            ctxs.push(linear_attention::context_on_tape(tape, kh, vh)?);
        }
        Ok(ctxs)
    }

    /// Scale queries attend the shared context: `O_s`.
    pub fn scale_attend<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        g_s: Var,
        ctxs: &[ContextVars],
        branch: usize,
    ) -> Result<Var> {
        let br = &self.branches[branch];
        let gn = br.ln.apply(store, tape, g_s)?;
        let wq = tape.param(store, br.wq);
        let q = tape.matmul(gn, wq)?;
        let dh = self.cfg.d / self.cfg.heads;
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            heads.push(linear_attention::attend_on_tape(tape, qh, &ctxs[h])?);
        }
        tape.concat_cols(&heads)
    }

    /// Concatenates the per-scale outputs on the feature axis, projects
    /// them back to width d and applies the residual MLP.
    pub fn fuse<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        outputs: &[Var],
    ) -> Result<Var> {
        if outputs.len() != self.branches.len() {
            return Err(invalid("fuse", "one output per scale required"));
        }
        let cat = tape.concat_cols(outputs)?;
        let wo = tape.param(store, self.wo);
        let agg = tape.matmul(cat, wo)?;
        let h = self.mlp_fc1.apply(store, tape, agg)?;
        let h = tape.gelu(h);
        let m = self.mlp_fc2.apply(store, tape, h)?;
        tape.add(agg, m)
    }

    /// Full block: shared KV -> per-head context (once) -> per-scale
    /// attention -> fuse. Returns the fused sequence `(T*h*w/4) x d`.
    pub fn forward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        tape: &mut Tape<T>,
        features: &[Var],
        phase: Phase,
    ) -> Result<Var> {
        let (k, v) = self.build_shared_kv(store, tape, features)?;
        let ctxs = self.build_contexts(tape, k, v)?;
        let mut outs = Vec::with_capacity(self.branches.len());
        for b in 0..self.branches.len() {
            let g_s = self.build_scale_features(store, tape, features, b, phase)?;
            outs.push(self.scale_attend(store, tape, g_s, &ctxs, b)?);
        }
        self.fuse(store, tape, &outs)
    }

    // -- pure recompositions used as oracles ------------------------------

    /// Pure-forward `G_s` for one branch (no tape, no state mutation).
    pub fn scale_features_pure<T: Real>(
        &self,
        store: &ParamStore<T>,
        features: &[Tensor<T>],
        branch: usize,
        phase: Phase,
    ) -> Result<Tensor<T>> {
        let br = &self.branches[branch];
        let pad = (br.s - 1) / 2;
        let mut parts = Vec::with_capacity(features.len());
        for (t, f) in features.iter().enumerate() {
            let c = tensor::depthwise_conv2d(f, store.value(br.conv[t]), 2, pad)?;
            let n = br.bn[t].apply_pure(store, &c, phase)?;
            parts.push(tensor::chw_to_tokens(&n.map(tensor::relu))?);
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        tensor::concat_rows(&refs)
    }

    /// Pure-forward pooled sequence and its K/V projections.
    pub fn shared_kv_pure<T: Real>(
        &self,
        store: &ParamStore<T>,
        features: &[Tensor<T>],
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut parts = Vec::with_capacity(features.len());
        for f in features {
            parts.push(tensor::chw_to_tokens(&tensor::avg_pool2d(f, 2, 2)?)?);
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        let m = tensor::concat_rows(&refs)?;
        let mn = self.ln_m.apply_pure(store, &m)?;
        Ok((
            tensor::matmul(&mn, store.value(self.wk))?,
            tensor::matmul(&mn, store.value(self.wv))?,
        ))
    }

    /// Quadratic-path recomposition of the whole block: identical pure
    /// kernels everywhere, but every scale re-derives attention through
    /// the O(N^2) [`linear_attention::naive_kernel_attend`] oracle.
    pub fn forward_naive_oracle<T: Real>(
        &self,
        store: &ParamStore<T>,
        features: &[Tensor<T>],
        phase: Phase,
    ) -> Result<Tensor<T>> {
        let (k, v) = self.shared_kv_pure(store, features)?;
        let dh = self.cfg.d / self.cfg.heads;
        let mut outs = Vec::with_capacity(self.branches.len());
        for b in 0..self.branches.len() {
            let g_s = self.scale_features_pure(store, features, b, phase)?;
            let gn = self.branches[b].ln.apply_pure(store, &g_s)?;
            let q = tensor::matmul(&gn, store.value(self.branches[b].wq))?;
            let mut heads = Vec::with_capacity(self.cfg.heads);
            for h in 0..self.cfg.heads {
                let qh = tensor::slice_cols(&q, h * dh, dh)?;
                let kh = tensor::slice_cols(&k, h * dh, dh)?;
                let vh = tensor::slice_cols(&v, h * dh, dh)?;
                heads.push(linear_attention::naive_kernel_attend(&qh, &kh, &vh)?);
            }
            let refs: Vec<&Tensor<T>> = heads.iter().collect();
            outs.push(tensor::concat_cols(&refs)?);
        }
        let refs: Vec<&Tensor<T>> = outs.iter().collect();
        let cat = tensor::concat_cols(&refs)?;
        let agg = tensor::matmul(&cat, store.value(self.wo))?;
        let h = self.mlp_fc1.apply_pure(store, &agg)?.map(tensor::gelu);
        let m = self.mlp_fc2.apply_pure(store, &h)?;
        agg.add(&m)
    }

    /// Plain linear-attention path for a single-scale configuration:
    /// queries from the lone branch, one shared context, no multi-scale
    /// machinery. With `scales = {1}` the block must degenerate to this.
    pub fn single_scale_linear_path<T: Real>(
        &self,
        store: &ParamStore<T>,
        features: &[Tensor<T>],
        phase: Phase,
    ) -> Result<Tensor<T>> {
        if self.branches.len() != 1 {
            return Err(invalid("degenerate_path", "single-scale config required"));
        }
        let (k, v) = self.shared_kv_pure(store, features)?;
        let g = self.scale_features_pure(store, features, 0, phase)?;
        let gn = self.branches[0].ln.apply_pure(store, &g)?;
        let q = tensor::matmul(&gn, store.value(self.branches[0].wq))?;
        let dh = self.cfg.d / self.cfg.heads;
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = tensor::slice_cols(&q, h * dh, dh)?;
            let kh = tensor::slice_cols(&k, h * dh, dh)?;
            let vh = tensor::slice_cols(&v, h * dh, dh)?;
            let gc = linear_attention::build_context(&kh, &vh)?;
            heads.push(linear_attention::linear_attend(&qh, &gc)?);
        }
        let refs: Vec<&Tensor<T>> = heads.iter().collect();
        let cat = tensor::concat_cols(&refs)?;
        let agg = tensor::matmul(&cat, store.value(self.wo))?;
        let h = self.mlp_fc1.apply_pure(store, &agg)?.map(tensor::gelu);
        let m = self.mlp_fc2.apply_pure(store, &h)?;
        agg.add(&m)
    }
}

/// Estimated multiply-accumulates of one fused forward pass.
pub fn fusion_macs(cfg: &FusionConfig) -> u64 {
    let t = cfg.tasks as u64;
    let hw = (cfg.h * cfg.w) as u64;
    let d = cfg.d as u64;
    let n = t * hw / 4;
    let mut macs = 0u64;
    for &s in &cfg.scales {
        let s = s as u64;
        macs += t * (hw / 4) * s * s * d; // depthwise conv at stride 2
        macs += n * d * d; // query projection
        macs += linear_attention::linear_attention_macs(n as usize, d as usize);
    }
    macs += t * hw * d; // pooling
    macs += 2 * n * d * d; // K and V projections
    let s_count = cfg.scales.len() as u64;
    macs += n * s_count * d * d; // W^O
    macs += n * d * 4 * d * 2; // MLP
    macs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_block(
        tasks: usize,
        h: usize,
        w: usize,
        d: usize,
        scales: &[usize],
        heads: usize,
        seed: u64,
    ) -> (FusionBlock, ParamStore<f64>, Vec<Tensor<f64>>) {
        let mut rng = SeedRng::new(seed);
        let mut store = ParamStore::new();
        let cfg = FusionConfig {
            tasks,
            h,
            w,
            d,
            scales: scales.to_vec(),
            heads,
        };
        let block = FusionBlock::new(cfg, &mut store, "fusion", &mut rng).unwrap();
        let features = (0..tasks)
            .map(|_| rng.normal_tensor(&[d, h, w], 1.0))
            .collect();
        (block, store, features)
    }

    #[test]
    fn output_shape_is_fused_sequence() {
        let (block, mut store, features) = toy_block(2, 8, 8, 16, &[1, 3, 5], 4, 14);
        let mut tape = Tape::new();
        let vars: Vec<Var> = features.iter().map(|f| tape.constant(f.clone())).collect();
        let out = block
            .forward(&mut store, &mut tape, &vars, Phase::Train)
            .unwrap();
        assert_eq!(tape.value(out).shape(), &[32, 16]);
    }

    #[test]
    fn odd_extent_rejected_at_config() {
        let cfg = FusionConfig {
            tasks: 1,
            h: 7,
            w: 8,
            d: 4,
            scales: alloc::vec![1],
            heads: 1,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn scale_features_match_composed_kernels() {
        let (block, mut store, features) = toy_block(2, 6, 6, 4, &[3], 1, 10);
        let mut tape = Tape::new();
        let vars: Vec<Var> = features.iter().map(|f| tape.constant(f.clone())).collect();
        let g = block
            .build_scale_features(&mut store, &mut tape, &vars, 0, Phase::Train)
            .unwrap();
        let pure = block
            .scale_features_pure(&store, &features, 0, Phase::Train)
            .unwrap();
        assert!(tape.value(g).bitwise_eq(&pure));
    }

    #[test]
    fn shared_kv_matches_composed_kernels() {
        let (block, store, features) = toy_block(3, 4, 4, 4, &[1], 1, 11);
        let mut tape = Tape::new();
        let vars: Vec<Var> = features.iter().map(|f| tape.constant(f.clone())).collect();
        let (k, v) = block.build_shared_kv(&store, &mut tape, &vars).unwrap();
        let (pk, pv) = block.shared_kv_pure(&store, &features).unwrap();
        assert!(tape.value(k).bitwise_eq(&pk));
        assert!(tape.value(v).bitwise_eq(&pv));
        // constant task features pool to rows equal to that constant
        let c = Tensor::filled(&[4, 4, 4], 0.3f64);
        let pooled = tensor::chw_to_tokens(&tensor::avg_pool2d(&c, 2, 2).unwrap()).unwrap();
        for i in 0..pooled.rows() {
            assert!(pooled.row(i).iter().all(|&x| (x - 0.3).abs() < 1e-12));
        }
    }

    #[test]
    fn block_matches_quadratic_recomposition() {
        let (block, mut store, features) = toy_block(2, 8, 8, 8, &[1, 3, 5], 2, 14);
        let mut tape = Tape::new();
        let vars: Vec<Var> = features.iter().map(|f| tape.constant(f.clone())).collect();
        let out = block
            .forward(&mut store, &mut tape, &vars, Phase::Train)
            .unwrap();
        let oracle = block
            .forward_naive_oracle(&store, &features, Phase::Train)
            .unwrap();
        let rel = tape.value(out).rel_linf(&oracle);
        assert!(rel <= 1e-9, "rel {rel}");
    }

    #[test]
    fn context_reuse_is_bitwise_invariant() {
        let (block, mut store, features) = toy_block(2, 4, 4, 8, &[1, 3, 5], 2, 12);
        // shared context across scales
        let mut tape = Tape::new();
        let vars: Vec<Var> = features.iter().map(|f| tape.constant(f.clone())).collect();
        let shared = block
            .forward(&mut store, &mut tape, &vars, Phase::Eval)
            .unwrap();
        // recompute the context inside every scale
        let mut tape2 = Tape::new();
        let vars2: Vec<Var> = features.iter().map(|f| tape2.constant(f.clone())).collect();
        let (k, v) = block.build_shared_kv(&store, &mut tape2, &vars2).unwrap();
        let mut outs = Vec::new();
        for b in 0..block.branches.len() {
            let ctxs = block.build_contexts(&mut tape2, k, v).unwrap();
            let g = block
                .build_scale_features(&mut store, &mut tape2, &vars2, b, Phase::Eval)
                .unwrap();
            outs.push(block.scale_attend(&store, &mut tape2, g, &ctxs, b).unwrap());
        }
        let per_scale = block.fuse(&store, &mut tape2, &outs).unwrap();
        assert!(tape.value(shared).bitwise_eq(tape2.value(per_scale)));
    }

    #[test]
    fn single_scale_identity_projection_passes_attention_through() {
        let (block, mut store, features) = toy_block(2, 4, 4, 4, &[3], 1, 13);
        let mut eye = Tensor::<f64>::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        store.get_mut(block.wo).value = eye;
        store.get_mut(block.mlp_fc2.w).value = Tensor::zeros(&[16, 4]);
        store.get_mut(block.mlp_fc2.b.unwrap()).value = Tensor::zeros(&[4]);
        let mut tape = Tape::new();
        let vars: Vec<Var> = features.iter().map(|f| tape.constant(f.clone())).collect();
        let (k, v) = block.build_shared_kv(&store, &mut tape, &vars).unwrap();
        let ctxs = block.build_contexts(&mut tape, k, v).unwrap();
        let g = block
            .build_scale_features(&mut store, &mut tape, &vars, 0, Phase::Train)
            .unwrap();
        let o1 = block.scale_attend(&store, &mut tape, g, &ctxs, 0).unwrap();
        let fused = block.fuse(&store, &mut tape, &[o1]).unwrap();
        assert!(tape.value(fused).bitwise_eq(tape.value(o1)));
    }

    #[test]
    fn identical_task_features_give_identical_token_blocks() {
        let mut rng = SeedRng::new(40);
        let mut store = ParamStore::new();
        let cfg = FusionConfig {
            tasks: 2,
            h: 4,
            w: 4,
            d: 4,
            scales: alloc::vec![3],
            heads: 1,
        };
        let mut block = FusionBlock::new(cfg, &mut store, "fusion", &mut rng).unwrap();
        // share weights across the two tasks so symmetry is exact
        block.branches[0].conv[1] = block.branches[0].conv[0];
        block.branches[0].bn[1] = block.branches[0].bn[0].clone();
        let f = rng.normal_tensor::<f64>(&[4, 4, 4], 1.0);
        let features = alloc::vec![f.clone(), f];
        let mut tape = Tape::new();
        let vars: Vec<Var> = features.iter().map(|x| tape.constant(x.clone())).collect();
        let out = block
            .forward(&mut store, &mut tape, &vars, Phase::Eval)
            .unwrap();
        let seq = tape.value(out);
        let half = seq.rows() / 2;
        for r in 0..half {
            assert_eq!(seq.row(r), seq.row(half + r));
        }
    }
}
