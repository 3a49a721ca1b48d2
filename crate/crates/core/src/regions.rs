//! Region → patch selection, and parameter-free aggregation of the selected
//! patches into a single region embedding.

use thiserror::Error;

use crate::types::{
    neumaier_sum, Aggregation, ImageSize, PatchGrid, PatchSelection, PixelBox, RegionEmbedding, RegionKind, RegionSpec,
    SpecError,
};

#[derive(Debug, Error)]
pub enum RegionError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("box {0:?} overlaps no patch of the grid")]
    EmptySelection([f64; 4]),
    #[error("mode error: {0}")]
    Mode(String),
    #[error("attention mass over the selection is zero")]
    DegenerateWeight,
}

impl From<SpecError> for RegionError {
    fn from(e: SpecError) -> Self {
        RegionError::Validation(e.to_string())
    }
}

/// Cells with strictly positive overlap with `bbox`, in ascending flat order.
fn box_cells(bbox: &PixelBox, rows: usize, cols: usize, image: ImageSize) -> Result<Vec<usize>, RegionError> {
    let sx = cols as f64 / image.width as f64;
    let sy = rows as f64 / image.height as f64;
    let x0 = (bbox.x0 * sx).clamp(0.0, cols as f64);
    let x1 = (bbox.x1 * sx).clamp(0.0, cols as f64);
    let y0 = (bbox.y0 * sy).clamp(0.0, rows as f64);
    let y1 = (bbox.y1 * sy).clamp(0.0, rows as f64);
    if !(x0 < x1 && y0 < y1) {
        return Err(RegionError::EmptySelection((*bbox).into()));
    }
    // cell c overlaps (x0, x1) with positive length iff c < x1 and c + 1 > x0
    let c_lo = x0.floor() as usize;
    let c_hi = (x1.ceil() as usize).min(cols) - 1;
    let r_lo = y0.floor() as usize;
    let r_hi = (y1.ceil() as usize).min(rows) - 1;
    let mut cells = Vec::with_capacity((r_hi - r_lo + 1) * (c_hi - c_lo + 1));
    for r in r_lo..=r_hi {
        for c in c_lo..=c_hi {
            cells.push(r * cols + c);
        }
    }
    Ok(cells)
}

fn point_cell(p: [f64; 2], rows: usize, cols: usize, image: ImageSize) -> usize {
    let col = (p[0] * cols as f64 / image.width as f64).floor().clamp(0.0, (cols - 1) as f64) as usize;
    let row = (p[1] * rows as f64 / image.height as f64).floor().clamp(0.0, (rows - 1) as f64) as usize;
    row * cols + col
}

/// Maps a region, given in pixels of an `image`-sized original, onto the
/// patch multiset it covers with uniform weights over the multiset.
///
/// Box sets keep duplicate patches, so a patch shared by two boxes counts
/// twice in the average; traces contribute one patch per point.
pub fn select_patches(spec: &RegionSpec, grid: &PatchGrid, image: ImageSize) -> Result<PatchSelection, RegionError> {
    spec.validate()?;
    if image.width == 0 || image.height == 0 {
        return Err(RegionError::Validation("image size must be positive".into()));
    }
    let (rows, cols) = (grid.rows(), grid.cols());
    let indices = match spec {
        RegionSpec::Image => (0..rows * cols).collect(),
        RegionSpec::Patch { patch: [r, c] } => {
            if *r >= rows || *c >= cols {
                return Err(RegionError::Validation(format!("patch ({r}, {c}) outside {rows}x{cols} grid")));
            }
            vec![r * cols + c]
        }
        RegionSpec::Box { bbox } => box_cells(bbox, rows, cols, image)?,
        RegionSpec::BoxSet { boxes } => {
            let mut all = Vec::new();
            for b in boxes {
                all.extend(box_cells(b, rows, cols, image)?);
            }
            all
        }
        RegionSpec::Trace { points } => points.iter().map(|p| point_cell(*p, rows, cols, image)).collect(),
    };
    Ok(PatchSelection::uniform(indices)?)
}

/// Unnormalized `exp(-(a² + b²))` over a `rows × cols` rectangle whose
/// corners sit at `(±1, ±1)`; a single row or column sits at 0.
/// Coordinates are computed as `(2i - (n-1)) / (n-1)` so mirrored cells get
/// bitwise-equal weights.
pub fn gaussian_weights_unnormalized(rows: usize, cols: usize) -> Vec<f64> {
    let coord = |i: usize, n: usize| if n > 1 { (2.0 * i as f64 - (n - 1) as f64) / (n - 1) as f64 } else { 0.0 };
    let mut w = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let b = coord(r, rows);
        for c in 0..cols {
            let a = coord(c, cols);
            w.push((-(a * a + b * b)).exp());
        }
    }
    w
}

/// Center-weighted patch weights, normalized to sum to one.
pub fn gaussian_weights(rows: usize, cols: usize) -> Vec<f64> {
    assert!(rows >= 1 && cols >= 1, "gaussian weights need a nonempty grid");
    let w = gaussian_weights_unnormalized(rows, cols);
    let total = neumaier_sum(w.iter().copied());
    w.into_iter().map(|x| x / total).collect()
}

/// Bounding rectangle `(r0, c0, rows, cols)` if the selection is exactly a
/// full rectangle of distinct contiguous patches.
fn as_rectangle(selection: &PatchSelection, cols: usize) -> Option<(usize, usize, usize, usize)> {
    let mut idx = selection.indices().to_vec();
    idx.sort_unstable();
    idx.dedup();
    if idx.len() != selection.len() {
        return None;
    }
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for &i in &idx {
        let (r, c) = (i / cols, i % cols);
        r0 = r0.min(r);
        r1 = r1.max(r);
        c0 = c0.min(c);
        c1 = c1.max(c);
    }
    let (h, w) = (r1 - r0 + 1, c1 - c0 + 1);
    (h * w == idx.len()).then_some((r0, c0, h, w))
}

/// Re-weights a selection under `mode`, returning the weights actually used
/// by [`aggregate`].
pub fn weigh(selection: &PatchSelection, grid: &PatchGrid, mode: Aggregation) -> Result<PatchSelection, RegionError> {
    selection.validate(grid.num_patches())?;
    match mode {
        Aggregation::Uniform => Ok(PatchSelection::uniform(selection.indices().to_vec())?),
        Aggregation::Gaussian => {
            let (r0, c0, h, w) = as_rectangle(selection, grid.cols()).ok_or_else(|| {
                RegionError::Mode("gaussian weighting needs a full rectangle of contiguous patches".into())
            })?;
            let frame = gaussian_weights_unnormalized(h, w);
            let raw = selection
                .indices()
                .iter()
                .map(|&i| frame[(i / grid.cols() - r0) * w + (i % grid.cols() - c0)])
                .collect();
            Ok(PatchSelection::from_raw_weights(selection.indices().to_vec(), raw)?)
        }
        Aggregation::Attention => {
            let att = grid
                .attention()
                .ok_or_else(|| RegionError::Mode("attention weighting needs a grid attention map".into()))?;
            let raw: Vec<f64> = selection.indices().iter().map(|&i| att[i] as f64).collect();
            if raw.iter().all(|w| *w == 0.0) {
                return Err(RegionError::DegenerateWeight);
            }
            Ok(PatchSelection::from_raw_weights(selection.indices().to_vec(), raw)?)
        }
    }
}

/// `Σ w_i v_i` accumulated in ascending flat-index order with compensated
/// summation, so permuting the selection does not change the result.
pub fn weighted_sum(selection: &PatchSelection, grid: &PatchGrid) -> Vec<f64> {
    let mut pairs: Vec<(usize, f64)> =
        selection.indices().iter().copied().zip(selection.weights().iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    (0..grid.dim())
        .map(|d| neumaier_sum(pairs.iter().map(|&(i, w)| w * grid.patch(i)[d] as f64)))
        .collect()
}

/// Aggregates the selected patches into one D-dimensional vector.
pub fn aggregate(selection: &PatchSelection, grid: &PatchGrid, mode: Aggregation) -> Result<Vec<f64>, RegionError> {
    let weighted = weigh(selection, grid, mode)?;
    Ok(weighted_sum(&weighted, grid))
}

/// Selection plus aggregation for a region spec. Returns the embedding and
/// the weighted selection that produced it.
pub fn embed_region(
    spec: &RegionSpec,
    grid: &PatchGrid,
    image: ImageSize,
    mode: Aggregation,
) -> Result<(RegionEmbedding, PatchSelection), RegionError> {
    // traces are sparse paths even when their cells happen to tile a rectangle
    if mode == Aggregation::Gaussian && spec.kind() == RegionKind::Trace {
        return Err(RegionError::Mode("gaussian weighting is not defined for trace regions".into()));
    }
    let selection = select_patches(spec, grid, image)?;
    let weighted = weigh(&selection, grid, mode)?;
    let vector = weighted_sum(&weighted, grid);
    Ok((RegionEmbedding { vector, kind: spec.kind(), aggregation: mode }, weighted))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: usize, cols: usize, dim: usize, att: Option<Vec<f32>>) -> PatchGrid {
        let data = (0..rows * cols * dim).map(|i| (i as f32 * 0.37).sin()).collect();
        PatchGrid::new(rows, cols, dim, data, (rows as u32 * 10, cols as u32 * 10), 10, att).unwrap()
    }

    fn size(g: &PatchGrid) -> ImageSize {
        ImageSize::new(g.cols() as u32 * 10, g.rows() as u32 * 10)
    }

    #[test]
    fn single_cell_box() {
        let g = grid(2, 2, 3, None);
        let spec = RegionSpec::Box { bbox: PixelBox::new(0.0, 0.0, 10.0, 10.0) };
        let sel = select_patches(&spec, &g, size(&g)).unwrap();
        assert_eq!(sel.indices(), &[0]);
        assert_eq!(sel.weights(), &[1.0]);
    }

    #[test]
    fn touching_edge_is_not_overlap() {
        let g = grid(2, 2, 1, None);
        // box (0,0)-(10.5,10): overlaps col 1 by 0.5px, row 1 not at all
        let spec = RegionSpec::Box { bbox: PixelBox::new(0.0, 0.0, 10.5, 10.0) };
        assert_eq!(select_patches(&spec, &g, size(&g)).unwrap().indices(), &[0, 1]);
    }

    #[test]
    fn box_set_keeps_duplicates() {
        let g = grid(2, 2, 2, None);
        let b1 = PixelBox::new(0.0, 0.0, 20.0, 10.0); // patches 0,1
        let b2 = PixelBox::new(10.0, 0.0, 20.0, 20.0); // patches 1,3
        let spec = RegionSpec::BoxSet { boxes: vec![b1, b2] };
        let sel = select_patches(&spec, &g, size(&g)).unwrap();
        assert_eq!(sel.indices(), &[0, 1, 1, 3]);
        assert_eq!(sel.weights(), &[0.25; 4]);

        // {0,1} ∪ {1,2}: aggregate = (v0 + 2 v1 + v2) / 4
        let sel = PatchSelection::uniform(vec![0, 1, 1, 2]).unwrap();
        let agg = aggregate(&sel, &g, Aggregation::Uniform).unwrap();
        for d in 0..2 {
            let expect = (g.patch(0)[d] as f64 + 2.0 * g.patch(1)[d] as f64 + g.patch(2)[d] as f64) / 4.0;
            assert!((agg[d] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn trace_multiplicity() {
        let g = grid(2, 2, 2, None);
        let spec = RegionSpec::Trace { points: vec![[1.0, 1.0], [2.0, 3.0], [15.0, 15.0]] };
        let sel = select_patches(&spec, &g, size(&g)).unwrap();
        assert_eq!(sel.indices(), &[0, 0, 3]);
        let agg = aggregate(&sel, &g, Aggregation::Uniform).unwrap();
        for d in 0..2 {
            let expect = (2.0 * g.patch(0)[d] as f64 + g.patch(3)[d] as f64) / 3.0;
            assert!((agg[d] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn trace_points_are_clamped() {
        let g = grid(2, 2, 1, None);
        let spec = RegionSpec::Trace { points: vec![[-5.0, -5.0], [25.0, 40.0], [20.0, 20.0]] };
        assert_eq!(select_patches(&spec, &g, size(&g)).unwrap().indices(), &[0, 3, 3]);
    }

    #[test]
    fn box_outside_image_is_empty() {
        let g = grid(2, 2, 1, None);
        let spec = RegionSpec::Box { bbox: PixelBox::new(30.0, 30.0, 40.0, 40.0) };
        assert!(matches!(select_patches(&spec, &g, size(&g)), Err(RegionError::EmptySelection(_))));
    }

    #[test]
    fn patch_out_of_grid() {
        let g = grid(2, 3, 1, None);
        assert!(matches!(
            select_patches(&RegionSpec::Patch { patch: [2, 0] }, &g, size(&g)),
            Err(RegionError::Validation(_))
        ));
        let sel = select_patches(&RegionSpec::Patch { patch: [1, 2] }, &g, size(&g)).unwrap();
        assert_eq!(sel.indices(), &[5]);
    }

    #[test]
    fn gaussian_examples() {
        assert_eq!(gaussian_weights(1, 1), vec![1.0]);
        let raw = gaussian_weights_unnormalized(3, 3);
        assert_eq!(raw[4], 1.0);
        assert!((raw[0] - (-2.0f64).exp()).abs() < 1e-15);
        assert!((raw[0] - 0.135335).abs() < 1e-6);
        for w in gaussian_weights(2, 2) {
            assert!((w - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn gaussian_needs_rectangle() {
        let g = grid(3, 3, 2, None);
        let trace = PatchSelection::uniform(vec![0, 4, 8]).unwrap();
        assert!(matches!(aggregate(&trace, &g, Aggregation::Gaussian), Err(RegionError::Mode(_))));
        let dup = PatchSelection::uniform(vec![0, 0]).unwrap();
        assert!(matches!(aggregate(&dup, &g, Aggregation::Gaussian), Err(RegionError::Mode(_))));
        // box covering a 2x2 sub-rectangle: gaussian in its own frame is uniform
        let sel = PatchSelection::uniform(vec![4, 5, 7, 8]).unwrap();
        let w = weigh(&sel, &g, Aggregation::Gaussian).unwrap();
        assert!(w.weights().iter().all(|x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn attention_modes() {
        let g = grid(3, 3, 2, None);
        let all = PatchSelection::uniform((0..9).collect()).unwrap();
        assert!(matches!(aggregate(&all, &g, Aggregation::Attention), Err(RegionError::Mode(_))));

        let mut att = vec![0.0f32; 9];
        att[4] = 2.0;
        let g = grid(3, 3, 2, Some(att));
        let agg = aggregate(&all, &g, Aggregation::Attention).unwrap();
        assert_eq!(agg, g.patch(4).iter().map(|v| *v as f64).collect::<Vec<_>>());
        let corner = PatchSelection::uniform(vec![0, 1]).unwrap();
        assert!(matches!(aggregate(&corner, &g, Aggregation::Attention), Err(RegionError::DegenerateWeight)));
    }

    #[test]
    fn singleton_any_mode_is_exact() {
        let g = grid(3, 3, 4, Some(vec![1.0; 9]));
        let sel = PatchSelection::uniform(vec![7]).unwrap();
        let expect: Vec<f64> = g.patch(7).iter().map(|v| *v as f64).collect();
        for mode in [Aggregation::Uniform, Aggregation::Gaussian, Aggregation::Attention] {
            assert_eq!(aggregate(&sel, &g, mode).unwrap(), expect);
        }
    }

    #[test]
    fn two_orthogonal_patches() {
        let g = PatchGrid::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0], (10, 20), 10, None).unwrap();
        let sel = PatchSelection::uniform(vec![0, 1]).unwrap();
        assert_eq!(aggregate(&sel, &g, Aggregation::Uniform).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn image_equals_full_box() {
        let g = grid(4, 5, 3, Some(vec![0.5; 20]));
        let s = ImageSize::new(333, 217);
        for mode in [Aggregation::Uniform, Aggregation::Gaussian, Aggregation::Attention] {
            let (a, _) = embed_region(&RegionSpec::Image, &g, s, mode).unwrap();
            let (b, _) = embed_region(&RegionSpec::Box { bbox: PixelBox::full(s) }, &g, s, mode).unwrap();
            assert_eq!(a.vector, b.vector);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_grid() -> impl Strategy<Value = PatchGrid> {
            (1usize..6, 1usize..6, 1usize..5).prop_flat_map(|(r, c, d)| {
                (
                    prop::collection::vec(-10.0f32..10.0, r * c * d),
                    prop::collection::vec(0.01f32..1.0, r * c),
                )
                    .prop_map(move |(data, att)| PatchGrid::new(r, c, d, data, (r as u32, c as u32), 1, Some(att)).unwrap())
            })
        }

        proptest! {
            #[test]
            fn convex_hull_all_modes(g in arb_grid(), picks in prop::collection::vec(any::<prop::sample::Index>(), 1..12), mode_pick in 0usize..2) {
                let n = g.num_patches();
                let idx: Vec<usize> = picks.iter().map(|p| p.index(n)).collect();
                let sel = PatchSelection::uniform(idx.clone()).unwrap();
                let mode = [Aggregation::Uniform, Aggregation::Attention][mode_pick];
                let agg = aggregate(&sel, &g, mode).unwrap();
                for d in 0..g.dim() {
                    let lo = idx.iter().map(|&i| g.patch(i)[d] as f64).fold(f64::INFINITY, f64::min);
                    let hi = idx.iter().map(|&i| g.patch(i)[d] as f64).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(agg[d] >= lo - 1e-12 && agg[d] <= hi + 1e-12);
                }
            }

            #[test]
            fn permutation_invariance(g in arb_grid(), picks in prop::collection::vec(any::<prop::sample::Index>(), 1..12), seed in any::<u64>()) {
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let n = g.num_patches();
                let idx: Vec<usize> = picks.iter().map(|p| p.index(n)).collect();
                let mut shuffled = idx.clone();
                shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                let a = aggregate(&PatchSelection::uniform(idx).unwrap(), &g, Aggregation::Uniform).unwrap();
                let b = aggregate(&PatchSelection::uniform(shuffled).unwrap(), &g, Aggregation::Uniform).unwrap();
                prop_assert_eq!(a, b);
            }

            #[test]
            fn gaussian_flip_symmetry(rows in 1usize..9, cols in 1usize..9) {
                let w = gaussian_weights(rows, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        let v = w[r * cols + c];
                        prop_assert_eq!(v, w[r * cols + (cols - 1 - c)]);
                        prop_assert_eq!(v, w[(rows - 1 - r) * cols + c]);
                    }
                }
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }

            #[test]
            fn constructors_normalize(g in arb_grid(), x0 in 0.0f64..1.0, y0 in 0.0f64..1.0, w in 0.01f64..1.0, h in 0.01f64..1.0) {
                let size = ImageSize::new(g.cols() as u32, g.rows() as u32);
                let bbox = PixelBox::new(x0 * size.width as f64, y0 * size.height as f64,
                    (x0 + w).min(1.0) * size.width as f64 + 1e-3, (y0 + h).min(1.0) * size.height as f64 + 1e-3);
                let spec = RegionSpec::Box { bbox };
                let sel = select_patches(&spec, &g, size).unwrap();
                sel.validate(g.num_patches()).unwrap();
                for mode in [Aggregation::Uniform, Aggregation::Gaussian, Aggregation::Attention] {
                    weigh(&sel, &g, mode).unwrap().validate(g.num_patches()).unwrap();
                }
            }
        }
    }
}
