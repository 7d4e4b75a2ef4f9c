//! Overlapping tokenizer and detokenizer.
//!
//! Patches of size `p` slide with stride `p - o`, so adjacent patches share
//! `o` rows/columns. Fields are zero-padded on the high-index side when the
//! stride does not divide evenly; the padding is recorded in the layout and
//! cropped again on reconstruction. Detokenization averages every patch value
//! covering a cell with uniform weights, which makes the round trip exact and
//! the whole pair a linear map — both directions run through one shared
//! [`ScatterPlan`] so the tape adjoint is correct by construction.

use ndarray::{Array3, Array4, ArrayView4};
use std::rc::Rc;

use crate::error::{ModelError, Result};
use crate::tape::ScatterPlan;

/// Patch geometry for one level on one grid.
///
/// The `_h` quantities apply to the first spatial axis (`W` in the
/// `T x W x H x C` field layout), `_w` to the second, matching the order the
/// patch counts `N_h x N_w` are reported in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchLayout {
    pub width: usize,
    pub height: usize,
    pub p_h: usize,
    pub p_w: usize,
    pub o_h: usize,
    pub o_w: usize,
    pub s_h: usize,
    pub s_w: usize,
    pub n_h: usize,
    pub n_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

fn plan_axis(extent: usize, p: usize, o: usize) -> Result<(usize, usize, usize)> {
    if p == 0 {
        return Err(ModelError::Layout("patch size must be positive".into()));
    }
    if o >= p {
        return Err(ModelError::Layout(format!(
            "overlap {o} must be smaller than patch size {p}"
        )));
    }
    let stride = p - o;
    let pad = if extent >= p {
        (stride - (extent - p) % stride) % stride
    } else {
        if extent <= o {
            return Err(ModelError::Layout(format!(
                "patch size {p} needs more padding than one stride on an axis of {extent} points"
            )));
        }
        p - extent
    };
    let count = (extent + pad - p) / stride + 1;
    Ok((stride, pad, count))
}

/// Plan patch extraction for a `W x H` grid. Padding is the minimum that
/// makes the stride divide evenly, always on the high-index side.
pub fn plan_layout(
    width: usize,
    height: usize,
    p_h: usize,
    p_w: usize,
    o_h: usize,
    o_w: usize,
) -> Result<PatchLayout> {
    let (s_h, pad_h, n_h) = plan_axis(width, p_h, o_h)?;
    let (s_w, pad_w, n_w) = plan_axis(height, p_w, o_w)?;
    Ok(PatchLayout {
        width,
        height,
        p_h,
        p_w,
        o_h,
        o_w,
        s_h,
        s_w,
        n_h,
        n_w,
        pad_h,
        pad_w,
    })
}

impl PatchLayout {
    pub fn n_patches(&self) -> usize {
        self.n_h * self.n_w
    }

    pub fn patch_len(&self) -> usize {
        self.p_h * self.p_w
    }

    /// How many patches cover cell (x, y).
    fn coverage(&self, x: usize, y: usize) -> usize {
        let count_axis = |pos: usize, p: usize, s: usize, n: usize| {
            let lo = if pos + 1 >= p { (pos + 1 - p).div_ceil(s) } else { 0 };
            let hi = (pos / s).min(n - 1);
            hi + 1 - lo
        };
        count_axis(x, self.p_h, self.s_h, self.n_h) * count_axis(y, self.p_w, self.s_w, self.n_w)
    }

    /// Gather plan: field `[T', W, H, C]` -> tokens `[N_h, N_w, C, T'*p_h*p_w]`.
    /// Padded positions have no entry and therefore read as zero.
    pub fn tokenize_plan(&self, t_stack: usize, channels: usize) -> ScatterPlan {
        let token_len = t_stack * self.patch_len();
        let in_shape = vec![t_stack, self.width, self.height, channels];
        let out_shape = vec![self.n_h, self.n_w, channels, token_len];
        let mut entries = Vec::new();
        for i in 0..self.n_h {
            for j in 0..self.n_w {
                for c in 0..channels {
                    for t in 0..t_stack {
                        for a in 0..self.p_h {
                            let x = i * self.s_h + a;
                            if x >= self.width {
                                continue;
                            }
                            for b in 0..self.p_w {
                                let y = j * self.s_w + b;
                                if y >= self.height {
                                    continue;
                                }
                                let out = ((i * self.n_w + j) * channels + c) * token_len
                                    + t * self.patch_len()
                                    + a * self.p_w
                                    + b;
                                let inp = ((t * self.width + x) * self.height + y) * channels + c;
                                entries.push((out, inp, 1.0));
                            }
                        }
                    }
                }
            }
        }
        ScatterPlan {
            in_shape,
            out_shape,
            entries,
        }
    }

    /// Averaging plan: per-patch values `[N_h, N_w, C, p_h*p_w]` ->
    /// field `[W, H, C]`. Each cell gets the mean of all covering patches.
    pub fn detokenize_plan(&self, channels: usize) -> ScatterPlan {
        let patch_len = self.patch_len();
        let in_shape = vec![self.n_h, self.n_w, channels, patch_len];
        let out_shape = vec![self.width, self.height, channels];
        let mut entries = Vec::new();
        for i in 0..self.n_h {
            for j in 0..self.n_w {
                for a in 0..self.p_h {
                    let x = i * self.s_h + a;
                    if x >= self.width {
                        continue;
                    }
                    for b in 0..self.p_w {
                        let y = j * self.s_w + b;
                        if y >= self.height {
                            continue;
                        }
                        let weight = 1.0 / self.coverage(x, y) as f64;
                        for c in 0..channels {
                            let inp = ((i * self.n_w + j) * channels + c) * patch_len
                                + a * self.p_w
                                + b;
                            let out = (x * self.height + y) * channels + c;
                            entries.push((out, inp, weight));
                        }
                    }
                }
            }
        }
        ScatterPlan {
            in_shape,
            out_shape,
            entries,
        }
    }
}

/// Per-variable patch vectors on the `N_h x N_w` grid.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub layout: PatchLayout,
    pub t_stack: usize,
    pub channels: usize,
    /// `[N_h, N_w, C, T' * p_h * p_w]`
    pub tokens: Array4<f64>,
}

/// Extract overlapping patches from a stacked field `[T', W, H, C]`.
pub fn tokenize(field: ArrayView4<'_, f64>, layout: &PatchLayout) -> Result<TokenGrid> {
    let (t_stack, w, h, c) = field.dim();
    if w != layout.width || h != layout.height {
        return Err(ModelError::Shape {
            what: "tokenize field",
            expected: format!("{}x{}", layout.width, layout.height),
            actual: format!("{w}x{h}"),
        });
    }
    let plan = layout.tokenize_plan(t_stack, c);
    let out = plan.apply(&field.to_owned().into_dyn());
    Ok(TokenGrid {
        layout: layout.clone(),
        t_stack,
        channels: c,
        tokens: out.into_dimensionality().expect("4d tokens"),
    })
}

/// Reconstruct a `[W, H, C]` field from single-timestep patch values
/// `[N_h, N_w, C, p_h*p_w]`, averaging overlaps and cropping padding.
pub fn detokenize(values: &Array4<f64>, layout: &PatchLayout) -> Result<Array3<f64>> {
    let (n_h, n_w, c, len) = values.dim();
    if n_h != layout.n_h || n_w != layout.n_w || len != layout.patch_len() {
        return Err(ModelError::Shape {
            what: "detokenize values",
            expected: format!("{}x{}x_x{}", layout.n_h, layout.n_w, layout.patch_len()),
            actual: format!("{n_h}x{n_w}x{c}x{len}"),
        });
    }
    let plan = layout.detokenize_plan(c);
    let out = plan.apply(&values.clone().into_dyn());
    Ok(out.into_dimensionality().expect("3d field"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array4, IxDyn};
    use proptest::prelude::*;

    #[test]
    fn paper_case_three_by_three() {
        let layout = plan_layout(3, 3, 2, 2, 1, 1).unwrap();
        assert_eq!((layout.n_h, layout.n_w), (2, 2));
        assert_eq!((layout.pad_h, layout.pad_w), (0, 0));
    }

    #[test]
    fn non_overlapping_tiling() {
        let layout = plan_layout(4, 4, 2, 2, 0, 0).unwrap();
        assert_eq!((layout.n_h, layout.n_w), (2, 2));
        assert_eq!((layout.pad_h, layout.pad_w), (0, 0));
    }

    /// Brute-force search over start offsets: the planned layout must place
    /// patch i at i*stride and use the smallest high-side padding that makes
    /// the final patch end at or beyond the axis extent.
    #[test]
    fn layout_matches_brute_force_enumeration() {
        for (extent, p, o) in [(100usize, 64usize, 1usize), (100, 13, 4), (7, 3, 1), (5, 8, 2)] {
            let layout = plan_layout(extent, extent, p, p, o, o).map(|l| (l.pad_h, l.n_h));
            let stride = p - o;
            // Brute force: smallest count n with (n-1)*stride + p >= extent,
            // padding = (n-1)*stride + p - extent, requiring padding < stride
            // when the patch fits at all.
            let mut expected = None;
            for n in 1..=extent + p {
                let span = (n - 1) * stride + p;
                if span >= extent {
                    let pad = span - extent;
                    if extent > o {
                        expected = Some((pad, n));
                    }
                    break;
                }
            }
            match (layout, expected) {
                (Ok(got), Some(want)) => assert_eq!(got, want, "extent {extent} p {p} o {o}"),
                (Err(_), None) => {}
                (got, want) => panic!("extent {extent} p {p} o {o}: {got:?} vs {want:?}"),
            }
        }
    }

    #[test]
    fn rejects_overlap_ge_patch() {
        assert!(plan_layout(8, 8, 2, 2, 2, 0).is_err());
    }

    #[test]
    fn patch_values_match_index_arithmetic() {
        // 1x3x3x1 field holding 1..9; patch (0,0) must read (1,2,4,5).
        let field = Array4::from_shape_fn((1, 3, 3, 1), |(_, x, y, _)| (x * 3 + y + 1) as f64);
        let layout = plan_layout(3, 3, 2, 2, 1, 1).unwrap();
        let grid = tokenize(field.view(), &layout).unwrap();
        let token: Vec<f64> = grid
            .tokens
            .slice(ndarray::s![0, 0, 0, ..])
            .iter()
            .cloned()
            .collect();
        assert_eq!(token, vec![1.0, 2.0, 4.0, 5.0]);
        let token01: Vec<f64> = grid
            .tokens
            .slice(ndarray::s![0, 1, 0, ..])
            .iter()
            .cloned()
            .collect();
        assert_eq!(token01, vec![2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn constant_field_gives_constant_tokens() {
        let field = Array4::from_elem((2, 5, 4, 2), 3.25);
        let layout = plan_layout(5, 4, 3, 2, 1, 0).unwrap();
        let grid = tokenize(field.view(), &layout).unwrap();
        // Padded cells read zero; interior cells all read the constant.
        for v in grid.tokens.iter() {
            assert!(*v == 3.25 || *v == 0.0);
        }
    }

    #[test]
    fn zero_overlap_partitions_exactly() {
        let field = Array4::from_shape_fn((1, 4, 4, 1), |(_, x, y, _)| (x * 4 + y) as f64);
        let layout = plan_layout(4, 4, 2, 2, 0, 0).unwrap();
        let grid = tokenize(field.view(), &layout).unwrap();
        let mut seen: Vec<f64> = grid.tokens.iter().cloned().collect();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expected: Vec<f64> = (0..16).map(|v| v as f64).collect();
        assert_eq!(seen, expected);
    }

    #[test]
    fn coverage_count_example_from_hand_enumeration() {
        // 3x3, p=2, o=1: all patches 1 except patch (0,0) = 0. The center
        // cell is covered by all four patches, one contributing 0 -> 0.75.
        let layout = plan_layout(3, 3, 2, 2, 1, 1).unwrap();
        let mut values = Array4::from_elem((2, 2, 1, 4), 1.0);
        values.slice_mut(ndarray::s![0, 0, 0, ..]).fill(0.0);
        let field = detokenize(&values, &layout).unwrap();
        assert!((field[[1, 1, 0]] - 0.75).abs() < 1e-12);
        assert!((field[[0, 0, 0]] - 0.0).abs() < 1e-12);
        assert!((field[[2, 2, 0]] - 1.0).abs() < 1e-12);
        // Edge cells shared by two patches.
        assert!((field[[0, 1, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn analytic_coverage_matches_enumeration_for_random_layouts() {
        let mut state = 42u64;
        let mut next = |m: usize| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 33) as usize % m
        };
        let mut checked = 0;
        while checked < 50 {
            let w = 3 + next(14);
            let h = 3 + next(14);
            let p_h = 2 + next(w.min(6));
            let p_w = 2 + next(h.min(6));
            let o_h = next(p_h);
            let o_w = next(p_w);
            let Ok(layout) = plan_layout(w, h, p_h, p_w, o_h, o_w) else {
                continue;
            };
            checked += 1;
            // Enumerate every patch cell and count coverage per grid cell.
            let mut counts = vec![0usize; w * h];
            for i in 0..layout.n_h {
                for j in 0..layout.n_w {
                    for a in 0..p_h {
                        for b in 0..p_w {
                            let (x, y) = (i * layout.s_h + a, j * layout.s_w + b);
                            if x < w && y < h {
                                counts[x * h + y] += 1;
                            }
                        }
                    }
                }
            }
            for x in 0..w {
                for y in 0..h {
                    assert_eq!(
                        layout.coverage(x, y),
                        counts[x * h + y],
                        "layout {layout:?} cell ({x},{y})"
                    );
                    assert!(counts[x * h + y] > 0, "uncovered cell ({x},{y}) in {layout:?}");
                }
            }
        }
    }

    fn round_trip_error(w: usize, h: usize, p: usize, o: usize, seed: u64) -> f64 {
        let layout = plan_layout(w, h, p, p, o, o).unwrap();
        let mut state = seed | 1;
        let field = Array4::from_shape_fn((1, w, h, 2), |_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
        });
        let grid = tokenize(field.view(), &layout).unwrap();
        let tokens = grid.tokens;
        let back = detokenize(&tokens, &layout).unwrap();
        let mut max = 0f64;
        for x in 0..w {
            for y in 0..h {
                for c in 0..2 {
                    max = max.max((back[[x, y, c]] - field[[0, x, y, c]]).abs());
                }
            }
        }
        max
    }

    #[test]
    fn round_trip_identity_paper_case() {
        assert!(round_trip_error(3, 3, 2, 1, 7) < 1e-12);
    }

    proptest! {
        #[test]
        fn round_trip_identity_random_layouts(
            w in 3usize..20,
            h in 3usize..20,
            p in 2usize..8,
            o_frac in 0usize..8,
            seed in any::<u64>(),
        ) {
            let o = o_frac % p;
            prop_assume!(w > o && h > o);
            prop_assert!(round_trip_error(w, h, p, o, seed) < 1e-6);
        }

        /// Detokenize is linear: detok(a*P + b*Q) == a*detok(P) + b*detok(Q).
        #[test]
        fn detokenize_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let layout = plan_layout(6, 5, 3, 2, 1, 1).unwrap();
            let mut state = seed | 1;
            let mut rand_vals = || {
                Array4::from_shape_fn((layout.n_h, layout.n_w, 2, layout.patch_len()), |_| {
                    state = state
                        .wrapping_mul(6364136223846793005)
                        .wrapping_add(1442695040888963407);
                    ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
                })
            };
            let p = rand_vals();
            let q = rand_vals();
            let combo = detokenize(&(&p * a + &q * b), &layout).unwrap();
            let separate = detokenize(&p, &layout).unwrap() * a + detokenize(&q, &layout).unwrap() * b;
            for (x, y) in combo.iter().zip(separate.iter()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn tape_plans_share_pure_path() {
        // The tape op and the pure functions use the same plan object.
        let layout = plan_layout(5, 5, 3, 3, 1, 1).unwrap();
        let plan = layout.tokenize_plan(2, 1);
        let field = ndarray::ArrayD::from_shape_fn(IxDyn(&[2, 5, 5, 1]), |ix| {
            (ix[0] * 25 + ix[1] * 5 + ix[2]) as f64
        });
        let out = plan.apply(&field);
        let grid = tokenize(
            field
                .view()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap(),
            &layout,
        )
        .unwrap();
        assert_eq!(out.into_dimensionality::<ndarray::Ix4>().unwrap(), grid.tokens);
    }
}
