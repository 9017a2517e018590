//! Cross-window integrated attention block (CWIB).
//!
//! Two branches share one set of queries projected from the task
//! feature: non-overlapping window self-attention keeps local spatial
//! coherence, cross-attention over the distilled semantic tokens injects
//! global context. Branch outputs are concatenated, fused by a linear
//! layer with a residual back to the input, and finished with a pre-norm
//! FFN residual.
//!
//! Maps whose extents are not multiples of the window are zero-padded
//! bottom/right; padded positions are masked out of every key set and the
//! merge crops them away, so partition -> merge is exact on real content.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

// float intrinsics in no_std builds; std test builds shadow it
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{invalid, Result};
use crate::layers::{Dense, LayerNorm};
use crate::mhsa::softmax_attend;
use crate::param::{ParamId, ParamStore};
use crate::rng::SeedRng;
use crate::tape::{Tape, Var};
use crate::tensor::{self, Real, Tensor};

/// Window geometry for an `h x w` map: padded extents, the
/// window-ordered gather of token rows, its inverse, and the padding
/// mask per window slot.
#[derive(Clone, Debug)]
pub struct WindowGrid {
    pub h: usize,
    pub w: usize,
    pub win_h: usize,
    pub win_w: usize,
    pub padded_h: usize,
    pub padded_w: usize,
    /// window count
    pub windows: usize,
    /// row index into the `h*w` token matrix per window slot; -1 = pad
    partition_idx: Vec<isize>,
    /// window-slot index per original token row
    merge_idx: Vec<isize>,
    /// true where a window slot is padding
    pad_mask: Vec<bool>,
}

impl WindowGrid {
    pub fn new(h: usize, w: usize, win_h: usize, win_w: usize) -> Result<Self> {
        if h == 0 || w == 0 || win_h == 0 || win_w == 0 {
            return Err(invalid("window_grid", "extents must be positive"));
        }
        let padded_h = h.div_ceil(win_h) * win_h;
        let padded_w = w.div_ceil(win_w) * win_w;
        let (nwy, nwx) = (padded_h / win_h, padded_w / win_w);
        let windows = nwy * nwx;
        let area = win_h * win_w;
        let mut partition_idx = Vec::with_capacity(windows * area);
        let mut pad_mask = Vec::with_capacity(windows * area);
        let mut merge_idx = vec![-1isize; h * w];
        for wy in 0..nwy {
            for wx in 0..nwx {
                for iy in 0..win_h {
                    for ix in 0..win_w {
                        let y = wy * win_h + iy;
                        let x = wx * win_w + ix;
                        if y < h && x < w {
                            let row = y * w + x;
                            merge_idx[row] = partition_idx.len() as isize;
                            partition_idx.push(row as isize);
                            pad_mask.push(false);
                        } else {
                            partition_idx.push(-1);
                            pad_mask.push(true);
                        }
                    }
                }
            }
        }
        Ok(WindowGrid {
            h,
            w,
            win_h,
            win_w,
            padded_h,
            padded_w,
            windows,
            partition_idx,
            merge_idx,
            pad_mask,
        })
    }

    pub fn window_area(&self) -> usize {
        self.win_h * self.win_w
    }

    /// Splits `h*w x d` token rows into window order (padded slots are
    /// zero rows): `(windows * area) x d`.
    pub fn partition<T: Real>(&self, tape: &mut Tape<T>, tokens: Var) -> Result<Var> {
        if tape.value(tokens).rows() != self.h * self.w {
            return Err(invalid("partition", "token rows must equal h*w"));
        }
        tape.gather_rows(tokens, &self.partition_idx)
    }

    /// Inverse of [`WindowGrid::partition`]; crops padding.
    pub fn merge<T: Real>(&self, tape: &mut Tape<T>, windowed: Var) -> Result<Var> {
        if tape.value(windowed).rows() != self.windows * self.window_area() {
            return Err(invalid("merge", "row count must be windows*area"));
        }
        tape.gather_rows(windowed, &self.merge_idx)
    }

    pub fn partition_pure<T: Real>(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::gather_rows(tokens, &self.partition_idx)
    }

    pub fn merge_pure<T: Real>(&self, windowed: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::gather_rows(windowed, &self.merge_idx)
    }

    /// Key mask (true = masked) for one window.
    pub fn key_mask(&self, window: usize) -> &[bool] {
        let area = self.window_area();
        &self.pad_mask[window * area..(window + 1) * area]
    }
}

pub struct CwibConfig {
    pub d: usize,
    /// Semantic token count consumed by the cross branch.
    pub tokens: usize,
    pub win_h: usize,
    pub win_w: usize,
    pub heads: usize,
}

pub struct Cwib {
    pub cfg: CwibConfig,
    /// Shared pre-attention norm of the task feature; queries and window
    /// keys/values all project from it.
    pub ln_p: LayerNorm,
    pub wq: ParamId,
    pub w_wk: ParamId,
    pub w_wv: ParamId,
    /// Norm of the token path (tokens + positional embedding).
    pub ln_c: LayerNorm,
    pub w_ck: ParamId,
    pub w_cv: ParamId,
    /// Task-specific learnable positional embedding over the K tokens.
    pub pos: ParamId,
    pub fuse: Dense,
    pub ln_z: LayerNorm,
    pub ffn_fc1: Dense,
    pub ffn_fc2: Dense,
}

impl Cwib {
    pub fn new<T: Real>(
        cfg: CwibConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        if cfg.heads == 0 || cfg.d % cfg.heads != 0 {
            return Err(invalid("cwib", "heads must divide d"));
        }
        if cfg.tokens == 0 {
            return Err(invalid("cwib", "at least one semantic token"));
        }
        let d = cfg.d;
        let std = 1.0 / (d as f64).sqrt();
        Ok(Cwib {
            ln_p: LayerNorm::new(store, &format!("{prefix}.ln_p"), d)?,
            wq: store.add_normal(&format!("{prefix}.wq"), &[d, d], std, rng)?,
            w_wk: store.add_normal(&format!("{prefix}.w_wk"), &[d, d], std, rng)?,
            w_wv: store.add_normal(&format!("{prefix}.w_wv"), &[d, d], std, rng)?,
            ln_c: LayerNorm::new(store, &format!("{prefix}.ln_c"), d)?,
            w_ck: store.add_normal(&format!("{prefix}.w_ck"), &[d, d], std, rng)?,
            w_cv: store.add_normal(&format!("{prefix}.w_cv"), &[d, d], std, rng)?,
            pos: store.add_normal(&format!("{prefix}.pos"), &[cfg.tokens, d], 0.02, rng)?,
            fuse: Dense::new(store, &format!("{prefix}.fuse"), 2 * d, d, true, rng)?,
            ln_z: LayerNorm::new(store, &format!("{prefix}.ln_z"), d)?,
            ffn_fc1: Dense::new(store, &format!("{prefix}.ffn.fc1"), d, 4 * d, true, rng)?,
            ffn_fc2: Dense::new(store, &format!("{prefix}.ffn.fc2"), 4 * d, d, true, rng)?,
            cfg,
        })
    }

    /// Shared queries `Q' = LN(P) W'` over all token rows.
    fn queries<T: Real>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, p: Var) -> Result<Var> {
        let pn = self.ln_p.apply(store, tape, p)?;
        let wq = tape.param(store, self.wq);
        tape.matmul(pn, wq)
    }

    /// Window self-attention branch over the already-projected queries.
    fn wmsa_with_queries<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        p: Var,
        q: Var,
        grid: &WindowGrid,
    ) -> Result<Var> {
        let pn = self.ln_p.apply(store, tape, p)?;
        let wk = tape.param(store, self.w_wk);
        let wv = tape.param(store, self.w_wv);
        let k = tape.matmul(pn, wk)?;
        let v = tape.matmul(pn, wv)?;
        let qw = grid.partition(tape, q)?;
        let kw = grid.partition(tape, k)?;
        let vw = grid.partition(tape, v)?;
        let area = grid.window_area();
        let dh = self.cfg.d / self.cfg.heads;
        let scale = T::val(1.0 / (dh as f64).sqrt());
        let mut window_outs = Vec::with_capacity(grid.windows);
        for wi in 0..grid.windows {
            let rows: Vec<isize> = (wi * area..(wi + 1) * area).map(|r| r as isize).collect();
            let qs = tape.gather_rows(qw, &rows)?;
            let ks = tape.gather_rows(kw, &rows)?;
            let vs = tape.gather_rows(vw, &rows)?;
            let mask = grid.key_mask(wi);
            let masked: Option<Vec<bool>> = if mask.iter().any(|&m| m) {
                Some(mask.to_vec())
            } else {
                None
            };
            let mut heads = Vec::with_capacity(self.cfg.heads);
            for h in 0..self.cfg.heads {
                let qh = tape.slice_cols(qs, h * dh, dh)?;
                let kh = tape.slice_cols(ks, h * dh, dh)?;
                let vh = tape.slice_cols(vs, h * dh, dh)?;
                let kt = tape.transpose2(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scaled = tape.scale(scores, scale);
                let probs = tape.softmax_rows(scaled, masked.clone())?;
                heads.push(tape.matmul(probs, vh)?);
            }
            window_outs.push(tape.concat_cols(&heads)?);
        }
        let all = tape.concat_rows(&window_outs)?;
        grid.merge(tape, all)
    }

    /// `O_w`: window self-attention with freshly projected queries.
    pub fn wmsa<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        p: Var,
        grid: &WindowGrid,
    ) -> Result<Var> {
        let q = self.queries(store, tape, p)?;
        self.wmsa_with_queries(store, tape, p, q, grid)
    }

    /// `O_c`: cross-attention from every position to the semantic tokens
    /// (keys/values from `LN(tokens + E)`).
    pub fn cross_attend_with_queries<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        q: Var,
        tokens: Var,
    ) -> Result<Var> {
        if tape.value(tokens).rows() != self.cfg.tokens {
            return Err(invalid("cross_attend", "token count mismatch"));
        }
        let e = tape.param(store, self.pos);
        let te = tape.add(tokens, e)?;
        let tn = self.ln_c.apply(store, tape, te)?;
        let wk = tape.param(store, self.w_ck);
        let wv = tape.param(store, self.w_cv);
        let k = tape.matmul(tn, wk)?;
        let v = tape.matmul(tn, wv)?;
        let dh = self.cfg.d / self.cfg.heads;
        let scale = T::val(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose2(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, scale);
            let probs = tape.softmax_rows(scaled, None)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        tape.concat_cols(&heads)
    }

    pub fn cross_attend<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        p: Var,
        tokens: Var,
    ) -> Result<Var> {
        let q = self.queries(store, tape, p)?;
        self.cross_attend_with_queries(store, tape, q, tokens)
    }

    /// Whole block on `h*w x d` token rows. Queries are projected once
    /// and shared by both branches.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        p: Var,
        tokens: Var,
        grid: &WindowGrid,
    ) -> Result<Var> {
        if tape.value(p).cols() != self.cfg.d {
            return Err(invalid("cwib", "feature width mismatch"));
        }
        let q = self.queries(store, tape, p)?;
        let o_w = self.wmsa_with_queries(store, tape, p, q, grid)?;
        let o_c = self.cross_attend_with_queries(store, tape, q, tokens)?;
        let cat = tape.concat_cols(&[o_w, o_c])?;
        let fused = self.fuse.apply(store, tape, cat)?;
        let z = tape.add(fused, p)?;
        let zn = self.ln_z.apply(store, tape, z)?;
        let f = self.ffn_fc1.apply(store, tape, zn)?;
        let f = tape.gelu(f);
        let f = self.ffn_fc2.apply(store, tape, f)?;
        tape.add(z, f)
    }

    // -- pure recompositions ----------------------------------------------

    pub fn wmsa_pure<T: Real>(
        &self,
        store: &ParamStore<T>,
        p: &Tensor<T>,
        grid: &WindowGrid,
    ) -> Result<Tensor<T>> {
        let pn = self.ln_p.apply_pure(store, p)?;
        let q = tensor::matmul(&pn, store.value(self.wq))?;
        let k = tensor::matmul(&pn, store.value(self.w_wk))?;
        let v = tensor::matmul(&pn, store.value(self.w_wv))?;
        let qw = grid.partition_pure(&q)?;
        let kw = grid.partition_pure(&k)?;
        let vw = grid.partition_pure(&v)?;
        let area = grid.window_area();
        let dh = self.cfg.d / self.cfg.heads;
        let scale = T::val(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(grid.windows);
        for wi in 0..grid.windows {
            let rows: Vec<isize> = (wi * area..(wi + 1) * area).map(|r| r as isize).collect();
            let qs = tensor::gather_rows(&qw, &rows)?;
            let ks = tensor::gather_rows(&kw, &rows)?;
            let vs = tensor::gather_rows(&vw, &rows)?;
            let mask = grid.key_mask(wi);
            let masked = if mask.iter().any(|&m| m) {
                Some(mask)
            } else {
                None
            };
            let mut heads = Vec::with_capacity(self.cfg.heads);
            for h in 0..self.cfg.heads {
                let qh = tensor::slice_cols(&qs, h * dh, dh)?;
                let kh = tensor::slice_cols(&ks, h * dh, dh)?;
                let vh = tensor::slice_cols(&vs, h * dh, dh)?;
                heads.push(softmax_attend(&qh, &kh, &vh, scale, masked)?);
            }
            let refs: Vec<&Tensor<T>> = heads.iter().collect();
            outs.push(tensor::concat_cols(&refs)?);
        }
        let refs: Vec<&Tensor<T>> = outs.iter().collect();
        grid.merge_pure(&tensor::concat_rows(&refs)?)
    }

    pub fn cross_attend_pure<T: Real>(
        &self,
        store: &ParamStore<T>,
        p: &Tensor<T>,
        tokens: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let pn = self.ln_p.apply_pure(store, p)?;
        let q = tensor::matmul(&pn, store.value(self.wq))?;
        let te = tokens.add(store.value(self.pos))?;
        let tn = self.ln_c.apply_pure(store, &te)?;
        let k = tensor::matmul(&tn, store.value(self.w_ck))?;
        let v = tensor::matmul(&tn, store.value(self.w_cv))?;
        let dh = self.cfg.d / self.cfg.heads;
        let scale = T::val(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = tensor::slice_cols(&q, h * dh, dh)?;
            let kh = tensor::slice_cols(&k, h * dh, dh)?;
            let vh = tensor::slice_cols(&v, h * dh, dh)?;
            heads.push(softmax_attend(&qh, &kh, &vh, scale, None)?);
        }
        let refs: Vec<&Tensor<T>> = heads.iter().collect();
        tensor::concat_cols(&refs)
    }

    pub fn forward_pure<T: Real>(
        &self,
        store: &ParamStore<T>,
        p: &Tensor<T>,
        tokens: &Tensor<T>,
        grid: &WindowGrid,
    ) -> Result<Tensor<T>> {
        let o_w = self.wmsa_pure(store, p, grid)?;
        let o_c = self.cross_attend_pure(store, p, tokens)?;
        let cat = tensor::concat_cols(&[&o_w, &o_c])?;
        let fused = self.fuse.apply_pure(store, &cat)?;
        let z = fused.add(p)?;
        let zn = self.ln_z.apply_pure(store, &z)?;
        let f = self.ffn_fc1.apply_pure(store, &zn)?.map(tensor::gelu);
        let f = self.ffn_fc2.apply_pure(store, &f)?;
        z.add(&f)
    }
}

/// Estimated multiply-accumulates of one CWIB forward pass.
pub fn cwib_macs(hw: usize, d: usize, window_area: usize, tokens: usize) -> u64 {
    let hw = hw as u64;
    let d = d as u64;
    let wa = window_area as u64;
    let k = tokens as u64;
    let mut macs = 0;
    macs += 3 * hw * d * d; // Q', K_w, V_w
    macs += 2 * hw * wa * d; // window scores + weighted values
    macs += 2 * k * d * d; // K_c, V_c
    macs += 2 * hw * k * d; // cross scores + weighted values
    macs += hw * 2 * d * d; // fusion linear
    macs += hw * d * 4 * d * 2; // FFN
    macs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(
        h: usize,
        w: usize,
        d: usize,
        k: usize,
        win: (usize, usize),
        heads: usize,
        seed: u64,
    ) -> (Cwib, WindowGrid, ParamStore<f64>, Tensor<f64>, Tensor<f64>) {
        let mut rng = SeedRng::new(seed);
        let mut store = ParamStore::new();
        let cwib = Cwib::new(
            CwibConfig {
                d,
                tokens: k,
                win_h: win.0,
                win_w: win.1,
                heads,
            },
            &mut store,
            "cwib",
            &mut rng,
        )
        .unwrap();
        let grid = WindowGrid::new(h, w, win.0, win.1).unwrap();
        let p = rng.normal_tensor(&[h * w, d], 1.0);
        let tokens = rng.normal_tensor(&[k, d], 1.0);
        (cwib, grid, store, p, tokens)
    }

    #[test]
    fn partition_merge_roundtrip_exact() {
        let mut rng = SeedRng::new(60);
        for (h, w, wh, ww) in [(4, 4, 2, 2), (8, 8, 8, 8), (5, 5, 2, 2), (6, 10, 4, 3)] {
            let grid = WindowGrid::new(h, w, wh, ww).unwrap();
            let x = rng.normal_tensor::<f64>(&[h * w, 3], 1.0);
            let part = grid.partition_pure(&x).unwrap();
            let back = grid.merge_pure(&part).unwrap();
            assert!(
                back.bitwise_eq(&x),
                "roundtrip failed for {h}x{w}/{wh}x{ww}"
            );
        }
    }

    #[test]
    fn four_by_four_with_2x2_windows_has_four_windows() {
        let grid = WindowGrid::new(4, 4, 2, 2).unwrap();
        assert_eq!(grid.windows, 4);
        assert_eq!(grid.padded_h, 4);
        // full-map window
        let grid = WindowGrid::new(4, 4, 4, 4).unwrap();
        assert_eq!(grid.windows, 1);
    }

    #[test]
    fn five_by_five_pads_to_nine_windows_and_masks_padding() {
        let grid = WindowGrid::new(5, 5, 2, 2).unwrap();
        assert_eq!((grid.padded_h, grid.padded_w), (6, 6));
        assert_eq!(grid.windows, 9);
        let masked: usize = (0..9)
            .map(|w| grid.key_mask(w).iter().filter(|&&m| m).count())
            .sum();
        assert_eq!(masked, 36 - 25);
    }

    #[test]
    fn single_window_equals_global_attention() {
        let (cwib, grid, store, p, _) = toy(4, 4, 8, 4, (4, 4), 2, 17);
        let mut tape = Tape::new();
        let pv = tape.constant(p.clone());
        let o_w = cwib.wmsa(&store, &mut tape, pv, &grid).unwrap();
        // unwindowed reference on the same projections
        let pn = cwib.ln_p.apply_pure(&store, &p).unwrap();
        let q = tensor::matmul(&pn, store.value(cwib.wq)).unwrap();
        let k = tensor::matmul(&pn, store.value(cwib.w_wk)).unwrap();
        let v = tensor::matmul(&pn, store.value(cwib.w_wv)).unwrap();
        let scale = 1.0 / (4.0f64).sqrt();
        let mut heads = Vec::new();
        for h in 0..2 {
            let qh = tensor::slice_cols(&q, h * 4, 4).unwrap();
            let kh = tensor::slice_cols(&k, h * 4, 4).unwrap();
            let vh = tensor::slice_cols(&v, h * 4, 4).unwrap();
            heads.push(softmax_attend(&qh, &kh, &vh, scale, None).unwrap());
        }
        let refs: Vec<&Tensor<f64>> = heads.iter().collect();
        let global = tensor::concat_cols(&refs).unwrap();
        assert!(tape.value(o_w).rel_linf(&global) <= 1e-6);
    }

    #[test]
    fn one_by_one_windows_attend_only_themselves() {
        let (cwib, grid, store, p, _) = toy(3, 3, 4, 2, (1, 1), 1, 18);
        let mut tape = Tape::new();
        let pv = tape.constant(p.clone());
        let o_w = cwib.wmsa(&store, &mut tape, pv, &grid).unwrap();
        // each position's output is its own value projection
        let pn = cwib.ln_p.apply_pure(&store, &p).unwrap();
        let v = tensor::matmul(&pn, store.value(cwib.w_wv)).unwrap();
        assert!(tape.value(o_w).rel_linf(&v) <= 1e-12);
    }

    #[test]
    fn wmsa_matches_per_window_oracle() {
        let (cwib, grid, store, p, _) = toy(4, 4, 8, 4, (2, 2), 2, 17);
        let mut tape = Tape::new();
        let pv = tape.constant(p.clone());
        let o_w = cwib.wmsa(&store, &mut tape, pv, &grid).unwrap();
        let oracle = cwib.wmsa_pure(&store, &p, &grid).unwrap();
        assert!(tape.value(o_w).rel_linf(&oracle) <= 1e-12);
    }

    #[test]
    fn single_token_cross_attention_returns_its_value() {
        let (cwib, _, store, p, tokens) = toy(4, 4, 8, 1, (2, 2), 2, 19);
        let mut tape = Tape::new();
        let pv = tape.constant(p.clone());
        let tv = tape.constant(tokens.clone());
        let o_c = cwib.cross_attend(&store, &mut tape, pv, tv).unwrap();
        let te = tokens.add(store.value(cwib.pos)).unwrap();
        let tn = cwib.ln_c.apply_pure(&store, &te).unwrap();
        let v = tensor::matmul(&tn, store.value(cwib.w_cv)).unwrap();
        for r in 0..16 {
            for c in 0..8 {
                assert!((tape.value(o_c).data()[r * 8 + c] - v.data()[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_tokens_give_constant_output_rows() {
        let (cwib, _, mut store, p, _) = toy(4, 4, 8, 3, (2, 2), 2, 20);
        // zero the positional embedding so all keys coincide
        store.get_mut(cwib.pos).value = Tensor::zeros(&[3, 8]);
        let mut rng = SeedRng::new(21);
        let one = rng.normal_tensor::<f64>(&[1, 8], 1.0);
        let tokens =
            Tensor::from_vec(&[3, 8], [one.data(), one.data(), one.data()].concat()).unwrap();
        let mut tape = Tape::new();
        let pv = tape.constant(p);
        let tv = tape.constant(tokens.clone());
        let o_c = cwib.cross_attend(&store, &mut tape, pv, tv).unwrap();
        let tn = cwib.ln_c.apply_pure(&store, &tokens).unwrap();
        let v = tensor::matmul(&tn, store.value(cwib.w_cv)).unwrap();
        for r in 0..16 {
            for c in 0..8 {
                assert!((tape.value(o_c).data()[r * 8 + c] - v.data()[c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn joint_permutation_of_tokens_and_embedding_is_invariant() {
        let (cwib, _, mut store, p, tokens) = toy(4, 4, 8, 4, (2, 2), 2, 18);
        let mut tape = Tape::new();
        let pv = tape.constant(p.clone());
        let tv = tape.constant(tokens.clone());
        let base = cwib.cross_attend(&store, &mut tape, pv, tv).unwrap();
        let base_val = tape.value(base).clone();

        let perm = [3isize, 0, 2, 1];
        let tokens_p = tensor::gather_rows(&tokens, &perm).unwrap();
        let pos_p = tensor::gather_rows(store.value(cwib.pos), &perm).unwrap();
        store.get_mut(cwib.pos).value = pos_p;
        let mut tape2 = Tape::new();
        let pv2 = tape2.constant(p);
        let tv2 = tape2.constant(tokens_p);
        let permuted = cwib.cross_attend(&store, &mut tape2, pv2, tv2).unwrap();
        assert!(tape2.value(permuted).rel_linf(&base_val) <= 1e-5);
    }

    #[test]
    fn zeroed_fusion_and_ffn_make_block_an_identity() {
        let (cwib, grid, mut store, p, tokens) = toy(4, 4, 8, 4, (2, 2), 2, 22);
        store.get_mut(cwib.fuse.w).value = Tensor::zeros(&[16, 8]);
        store.get_mut(cwib.fuse.b.unwrap()).value = Tensor::zeros(&[8]);
        store.get_mut(cwib.ffn_fc2.w).value = Tensor::zeros(&[32, 8]);
        store.get_mut(cwib.ffn_fc2.b.unwrap()).value = Tensor::zeros(&[8]);
        let mut tape = Tape::new();
        let pv = tape.constant(p.clone());
        let tv = tape.constant(tokens);
        let x = cwib.forward(&store, &mut tape, pv, tv, &grid).unwrap();
        assert!(tape.value(x).bitwise_eq(&p));
    }

    #[test]
    fn block_shape_and_oracle_agreement() {
        let (cwib, grid, store, p, tokens) = toy(8, 8, 16, 4, (4, 4), 4, 19);
        let mut tape = Tape::new();
        let pv = tape.constant(p.clone());
        let tv = tape.constant(tokens.clone());
        let x = cwib.forward(&store, &mut tape, pv, tv, &grid).unwrap();
        assert_eq!(tape.value(x).shape(), &[64, 16]);
        let oracle = cwib.forward_pure(&store, &p, &tokens, &grid).unwrap();
        assert!(tape.value(x).rel_linf(&oracle) <= 1e-12);
    }
}
