//! Split a flow field into contact patches.
//!
//! Pixels whose flow magnitude exceeds a threshold form a mask that is eroded
//! to drop specks and dilated again so narrow contacts are not split. Each
//! 8-connected component gives an outer bounding box; the box is padded and
//! kept when the flow it encloses is large enough.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{GridSpec, Mask, Rect, VectorField2};

pub const PATCH_PADDING: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ThresholdError {
    #[error("{0} must be finite and non-negative")]
    Negative(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Low,
    Mid,
    High,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentationThresholds {
    /// Per-pixel flow magnitude threshold, px.
    pub mask_mag: f64,
    pub erode_iters: u32,
    pub dilate_iters: u32,
    /// Minimum summed |flow| inside a padded box, px.
    pub box_sum_min: f64,
    pub preset: Preset,
}

impl SegmentationThresholds {
    /// Repo-calibrated presets for the default 960x540 synthetic skin; the
    /// box sums place the detection floor near 0.4 N, 0.75 N and 1.2 N.
    pub fn preset(p: Preset) -> Self {
        let (mask_mag, erode_iters, dilate_iters, box_sum_min) = match p {
            Preset::Low => (0.3, 1, 2, 1_300.0),
            Preset::Mid => (0.6, 2, 3, 4_800.0),
            Preset::High | Preset::Custom => (1.0, 2, 3, 7_900.0),
        };
        Self {
            mask_mag,
            erode_iters,
            dilate_iters,
            box_sum_min,
            preset: p,
        }
    }

    pub fn low() -> Self {
        Self::preset(Preset::Low)
    }

    pub fn mid() -> Self {
        Self::preset(Preset::Mid)
    }

    pub fn high() -> Self {
        Self::preset(Preset::High)
    }

    pub fn validate(&self) -> Result<(), ThresholdError> {
        if !(self.mask_mag >= 0.0 && self.mask_mag.is_finite()) {
            return Err(ThresholdError::Negative("mask_mag"));
        }
        if !(self.box_sum_min >= 0.0 && self.box_sum_min.is_finite()) {
            return Err(ThresholdError::Negative("box_sum_min"));
        }
        Ok(())
    }
}

impl Default for SegmentationThresholds {
    fn default() -> Self {
        Self::high()
    }
}

#[derive(Debug, Clone)]
pub struct ContactPatch {
    /// Padded box in frame coordinates.
    pub bbox: Rect,
    /// Component box before padding.
    pub core: Rect,
    pub subflow: VectorField2,
    pub flow_sum_abs: f64,
}

pub fn build_mask(f: &VectorField2, t: &SegmentationThresholds) -> Mask {
    let spec = f.spec();
    let thr2 = t.mask_mag * t.mask_mag;
    let bits: Vec<bool> = f
        .u()
        .iter()
        .zip(f.v())
        .map(|(a, b)| a * a + b * b > thr2)
        .collect();
    let mut mask = Mask::new(spec, bits).expect("length matches grid");
    erode(&mut mask, t.erode_iters as usize);
    dilate(&mut mask, t.dilate_iters as usize);
    mask
}

/// `iters` erosions with a 3x3 square; pixels outside the frame do not erode.
pub fn erode(mask: &mut Mask, iters: usize) {
    if iters > 0 {
        box_pass(mask, iters, true);
    }
}

/// `iters` dilations with a 3x3 square; pixels outside the frame are unset.
pub fn dilate(mask: &mut Mask, iters: usize) {
    if iters > 0 {
        box_pass(mask, iters, false);
    }
}

/// Repeating a 3x3 operation `k` times equals one pass with a (2k+1)
/// square clipped to the frame, which is separable into a row pass and a
/// column pass. `all` selects erosion (every pixel set) over dilation.
/// Empty rows stay empty under both, so sparse masks are cheap.
fn box_pass(mask: &mut Mask, k: usize, all: bool) {
    let GridSpec { width: w, height: h, .. } = mask.spec();
    // count pixels that break the condition: unset for erosion, set for dilation
    let bad = |b: bool| if all { !b } else { b };
    let decide = |count: usize| if all { count == 0 } else { count > 0 };
    let bits = mask.bits_mut();

    let mut row_out = vec![false; w * h];
    let mut row_any = vec![false; h];
    for y in 0..h {
        let row = &bits[y * w..(y + 1) * w];
        if !row.contains(&true) {
            continue;
        }
        let mut count = row[..k.min(w)].iter().filter(|&&b| bad(b)).count();
        for x in 0..w {
            if x + k < w && bad(row[x + k]) {
                count += 1;
            }
            row_out[y * w + x] = decide(count);
            if x >= k && bad(row[x - k]) {
                count -= 1;
            }
        }
        row_any[y] = row_out[y * w..(y + 1) * w].contains(&true);
    }
    for y in 0..h {
        let (lo, hi) = (y.saturating_sub(k), (y + k).min(h - 1));
        let out = &mut bits[y * w..(y + 1) * w];
        let live = if all {
            row_any[lo..=hi].iter().all(|&b| b)
        } else {
            row_any[lo..=hi].contains(&true)
        };
        if !live {
            out.fill(false);
            continue;
        }
        out.copy_from_slice(&row_out[lo * w..(lo + 1) * w]);
        for r in lo + 1..=hi {
            let src = &row_out[r * w..(r + 1) * w];
            if all {
                out.iter_mut().zip(src).for_each(|(o, s)| *o &= *s);
            } else {
                out.iter_mut().zip(src).for_each(|(o, s)| *o |= *s);
            }
        }
    }
}

/// Bounding boxes of 8-connected components, in label order.
pub fn component_boxes(mask: &Mask) -> Vec<Rect> {
    let GridSpec { width: w, height: h, .. } = mask.spec();
    let bits = mask.bits();
    let mut runs: Vec<(usize, usize, usize)> = Vec::new(); // (y, x0, x1)
    let mut row_start = Vec::with_capacity(h + 1);
    for y in 0..h {
        row_start.push(runs.len());
        let row = &bits[y * w..(y + 1) * w];
        let mut x = 0;
        while x < w {
            if row[x] {
                let s = x;
                while x < w && row[x] {
                    x += 1;
                }
                runs.push((y, s, x));
            } else {
                x += 1;
            }
        }
    }
    row_start.push(runs.len());

    let mut parent: Vec<usize> = (0..runs.len()).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for y in 1..h {
        let (prev, cur) = (row_start[y - 1]..row_start[y], row_start[y]..row_start[y + 1]);
        let mut j = prev.start;
        for i in cur {
            let (_, a0, a1) = runs[i];
            // skip previous runs that end before this one can touch them
            while j < prev.end && runs[j].2 < a0 {
                j += 1;
            }
            let mut k = j;
            while k < prev.end && runs[k].1 <= a1 {
                let (ri, rk) = (find(&mut parent, i), find(&mut parent, k));
                if ri != rk {
                    parent[ri.max(rk)] = ri.min(rk);
                }
                k += 1;
            }
        }
    }

    let mut boxes: Vec<Option<Rect>> = vec![None; runs.len()];
    let mut order = Vec::new();
    for (i, &(y, x0, x1)) in runs.iter().enumerate() {
        let root = find(&mut parent, i);
        let r = Rect::new(x0, y, x1, y + 1);
        match &mut boxes[root] {
            Some(b) => *b = b.union(&r),
            slot => {
                *slot = Some(r);
                order.push(root);
            }
        }
    }
    order.into_iter().map(|r| boxes[r].unwrap()).collect()
}

/// Merge boxes until none intersect. Components sitting in another
/// component's hole vanish into the enclosing box this way.
fn merge_overlapping(mut boxes: Vec<Rect>) -> Vec<Rect> {
    loop {
        let mut merged = false;
        let mut out: Vec<Rect> = Vec::with_capacity(boxes.len());
        for b in boxes {
            let mut cur = b;
            let mut i = 0;
            while i < out.len() {
                if out[i].intersects(&cur) {
                    cur = cur.union(&out.swap_remove(i));
                    merged = true;
                    i = 0;
                } else {
                    i += 1;
                }
            }
            out.push(cur);
        }
        boxes = out;
        if !merged {
            return boxes;
        }
    }
}

pub fn box_abs_sum(f: &VectorField2, r: Rect) -> f64 {
    let w = f.spec().width;
    let mut s = 0.0;
    for y in r.y0..r.y1 {
        let row = y * w;
        for i in row + r.x0..row + r.x1 {
            s += f.u()[i].hypot(f.v()[i]);
        }
    }
    s
}

pub fn extract_patches(f: &VectorField2, m: &Mask, t: &SegmentationThresholds) -> Vec<ContactPatch> {
    let spec = f.spec();
    assert!(
        spec.width == m.spec().width && spec.height == m.spec().height,
        "mask and flow grids differ"
    );
    let mut patches: Vec<ContactPatch> = merge_overlapping(component_boxes(m))
        .into_iter()
        .filter_map(|core| {
            let bbox = core.padded(PATCH_PADDING, spec.width, spec.height);
            let flow_sum_abs = box_abs_sum(f, bbox);
            (flow_sum_abs >= t.box_sum_min).then(|| ContactPatch {
                bbox,
                core,
                subflow: f.crop(bbox),
                flow_sum_abs,
            })
        })
        .collect();
    patches.sort_by_key(|p| (p.bbox.x0, p.bbox.y0));
    patches
}

pub fn segment(f: &VectorField2, t: &SegmentationThresholds) -> (Mask, Vec<ContactPatch>) {
    let m = build_mask(f, t);
    let patches = extract_patches(f, &m, t);
    (m, patches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(w: usize, h: usize) -> GridSpec {
        GridSpec::new(w, h).unwrap()
    }

    /// Per-pixel 3x3 morphology applied `iters` times.
    fn brute_morph(mask: &Mask, iters: usize, erode: bool) -> Mask {
        let spec = mask.spec();
        let mut cur = mask.clone();
        for _ in 0..iters {
            let prev = cur.clone();
            cur = Mask::from_fn(spec, |x, y| {
                let mut acc = erode;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= spec.width as i64 || ny >= spec.height as i64 {
                            continue;
                        }
                        let b = prev.get(nx as usize, ny as usize);
                        acc = if erode { acc && b } else { acc || b };
                    }
                }
                acc
            });
        }
        cur
    }

    /// Flood-fill labeling oracle: number of components and their boxes.
    fn flood_boxes(mask: &Mask) -> Vec<Rect> {
        let spec = mask.spec();
        let mut seen = vec![false; spec.len()];
        let mut out = Vec::new();
        for y in 0..spec.height {
            for x in 0..spec.width {
                if !mask.get(x, y) || seen[spec.index(x, y)] {
                    continue;
                }
                let mut r = Rect::new(x, y, x + 1, y + 1);
                let mut stack = vec![(x, y)];
                seen[spec.index(x, y)] = true;
                while let Some((cx, cy)) = stack.pop() {
                    r = r.union(&Rect::new(cx, cy, cx + 1, cy + 1));
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (nx, ny) = (cx as i64 + dx, cy as i64 + dy);
                            if nx < 0 || ny < 0 || nx >= spec.width as i64 || ny >= spec.height as i64 {
                                continue;
                            }
                            let (nx, ny) = (nx as usize, ny as usize);
                            let i = spec.index(nx, ny);
                            if mask.get(nx, ny) && !seen[i] {
                                seen[i] = true;
                                stack.push((nx, ny));
                            }
                        }
                    }
                }
                out.push(r);
            }
        }
        out
    }

    fn gaussian_bumps(spec: GridSpec, centres: &[(f64, f64)], sigma: f64, peak: f64) -> VectorField2 {
        VectorField2::from_fn(spec, |x, y| {
            let mut u = 0.0;
            for &(cx, cy) in centres {
                let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                u += peak * (-r2 / (2.0 * sigma * sigma)).exp();
            }
            (u, 0.0)
        })
    }

    fn custom(mask_mag: f64, erode: u32, dilate: u32, box_sum_min: f64) -> SegmentationThresholds {
        SegmentationThresholds {
            mask_mag,
            erode_iters: erode,
            dilate_iters: dilate,
            box_sum_min,
            preset: Preset::Custom,
        }
    }

    #[test]
    fn zero_field_gives_empty_mask_and_no_patches() {
        let f = VectorField2::zeros(grid(30, 20));
        let (m, p) = segment(&f, &SegmentationThresholds::low());
        assert_eq!(m.count(), 0);
        assert!(p.is_empty());
    }

    #[test]
    fn single_speck_is_eroded() {
        let spec = grid(15, 15);
        let f = VectorField2::from_fn(spec, |x, y| if (x, y) == (7, 7) { (5.0, 0.0) } else { (0.0, 0.0) });
        assert_eq!(build_mask(&f, &custom(0.5, 1, 1, 0.0)).count(), 0);
    }

    #[test]
    fn square_morphology_matches_brute_force() {
        let spec = grid(40, 40);
        let f = VectorField2::from_fn(spec, |x, y| {
            if (10..30).contains(&x) && (8..28).contains(&y) { (1.0, 1.0) } else { (0.0, 0.0) }
        });
        let m = build_mask(&f, &custom(0.5, 2, 2, 0.0));
        let raw = Mask::from_fn(spec, |x, y| (10..30).contains(&x) && (8..28).contains(&y));
        let oracle = brute_morph(&brute_morph(&raw, 2, true), 2, false);
        assert_eq!(m, oracle);
        let b = component_boxes(&m);
        assert_eq!(b.len(), 1);
        assert!(b[0].x0.abs_diff(10) <= 2 && b[0].x1.abs_diff(30) <= 2);
        assert!(b[0].y0.abs_diff(8) <= 2 && b[0].y1.abs_diff(28) <= 2);
    }

    #[test]
    fn two_bumps_far_apart_give_two_patches() {
        let spec = grid(200, 80);
        let f = gaussian_bumps(spec, &[(50.0, 40.0), (130.0, 40.0)], 10.0, 3.0);
        let t = custom(0.5, 1, 2, 0.0);
        let m = build_mask(&f, &t);
        assert_eq!(flood_boxes(&m).len(), 2);
        let p = extract_patches(&f, &m, &t);
        assert_eq!(p.len(), 2);
        assert!(p[0].bbox.contains(50, 40) && p[1].bbox.contains(130, 40));
        assert_eq!(p[0].subflow.spec().width, p[0].bbox.width());
    }

    #[test]
    fn close_bumps_merge() {
        let spec = grid(200, 80);
        let f = gaussian_bumps(spec, &[(90.0, 40.0), (105.0, 40.0)], 10.0, 3.0);
        let t = custom(0.5, 1, 2, 0.0);
        let m = build_mask(&f, &t);
        assert_eq!(flood_boxes(&m).len(), 1);
        assert_eq!(extract_patches(&f, &m, &t).len(), 1);
    }

    #[test]
    fn inner_component_is_ignored() {
        // a ring with a separate blob inside its hole
        let spec = grid(60, 60);
        let m = Mask::from_fn(spec, |x, y| {
            let r = (x as f64 - 30.0).hypot(y as f64 - 30.0);
            (15.0..20.0).contains(&r) || r < 3.0
        });
        assert_eq!(flood_boxes(&m).len(), 2);
        let f = VectorField2::uniform(spec, 1.0, 0.0);
        let p = extract_patches(&f, &m, &custom(0.5, 0, 0, 0.0));
        assert_eq!(p.len(), 1);
    }

    #[test]
    fn box_sum_filter_and_padding() {
        let spec = grid(100, 50);
        let f = gaussian_bumps(spec, &[(20.0, 25.0)], 4.0, 3.0)
            .add_scaled(1.0, &gaussian_bumps(spec, &[(70.0, 25.0)], 4.0, 0.8))
            .unwrap();
        let t = custom(0.5, 0, 0, 0.0);
        let m = build_mask(&f, &t);
        let all = extract_patches(&f, &m, &t);
        assert_eq!(all.len(), 2);
        let weak = all[1].flow_sum_abs;
        let strict = extract_patches(&f, &m, &custom(0.5, 0, 0, weak + 1.0));
        assert_eq!(strict.len(), 1);
        let p = &all[0];
        assert_eq!(p.bbox, p.core.padded(PATCH_PADDING, 100, 50));
        assert!((p.flow_sum_abs - box_abs_sum(&f, p.bbox)).abs() < 1e-12);
    }

    #[test]
    fn padding_is_clamped_to_frame() {
        let spec = grid(30, 30);
        let f = VectorField2::from_fn(spec, |x, y| if x < 5 && y < 5 { (2.0, 0.0) } else { (0.0, 0.0) });
        let p = extract_patches(&f, &build_mask(&f, &custom(1.0, 0, 0, 0.0)), &custom(1.0, 0, 0, 0.0));
        assert_eq!(p[0].bbox, Rect::new(0, 0, 9, 9));
    }

    #[test]
    fn presets_validate() {
        for p in [Preset::Low, Preset::Mid, Preset::High] {
            let t = SegmentationThresholds::preset(p);
            t.validate().unwrap();
            assert_eq!(t.dilate_iters, t.erode_iters + 1);
        }
        assert!(custom(-1.0, 0, 0, 0.0).validate().is_err());
    }

    fn arb_mask() -> impl Strategy<Value = Mask> {
        (4usize..30, 4usize..30)
            .prop_flat_map(|(w, h)| (Just(w), Just(h), proptest::collection::vec(proptest::bool::weighted(0.45), w * h)))
            .prop_map(|(w, h, bits)| Mask::new(grid(w, h), bits).unwrap())
    }

    proptest! {
        #[test]
        fn morphology_matches_iterated_oracle(m in arb_mask(), e in 0usize..4, d in 0usize..4) {
            let mut fast = m.clone();
            erode(&mut fast, e);
            dilate(&mut fast, d);
            let slow = brute_morph(&brute_morph(&m, e, true), d, false);
            prop_assert_eq!(fast, slow);
        }

        #[test]
        fn labeling_matches_flood_fill(m in arb_mask()) {
            let mut a = component_boxes(&m);
            let mut b = flood_boxes(&m);
            a.sort_by_key(|r| (r.y0, r.x0, r.y1, r.x1));
            b.sort_by_key(|r| (r.y0, r.x0, r.y1, r.x1));
            prop_assert_eq!(a, b);
        }

        #[test]
        fn patches_conserve_masked_pixels(m in arb_mask()) {
            let spec = m.spec();
            let f = VectorField2::uniform(spec, 1.0, 0.0);
            let p = extract_patches(&f, &m, &custom(0.5, 0, 0, 0.0));
            for i in 0..p.len() {
                for j in i + 1..p.len() {
                    prop_assert!(!p[i].core.intersects(&p[j].core));
                }
            }
            for y in 0..spec.height {
                for x in 0..spec.width {
                    if m.get(x, y) {
                        prop_assert_eq!(p.iter().filter(|q| q.core.contains(x, y)).count(), 1);
                    }
                }
            }
            for w in p.windows(2) {
                prop_assert!(w[0].bbox.x0 <= w[1].bbox.x0);
            }
        }

        #[test]
        fn raising_thresholds_is_monotone(seed in any::<u64>(), lo in 0.0f64..2.0, dt in 0.0f64..2.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let f = VectorField2::from_fn(grid(32, 24), |_, _| (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)));
            let (a, b) = (build_mask(&f, &custom(lo, 1, 2, 0.0)), build_mask(&f, &custom(lo + dt, 1, 2, 0.0)));
            prop_assert!(b.count() <= a.count());
            let n1 = extract_patches(&f, &a, &custom(lo, 1, 2, 5.0)).len();
            let n2 = extract_patches(&f, &a, &custom(lo, 1, 2, 5.0 + 100.0 * dt)).len();
            prop_assert!(n2 <= n1);
        }
    }
}
