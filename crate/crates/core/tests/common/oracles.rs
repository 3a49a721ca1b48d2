//! Independent reference implementations used as test oracles. They share
//! no code with the library beyond plain data types and are written for
//! clarity, not speed.
#![allow(dead_code)]

use pioner_core::types::{ImageSize, PatchGrid, PixelBox, RegionSpec};
use rand::Rng;

// ---------------------------------------------------------------- regions

/// Patch cells overlapping a box, found by testing every cell's pixel extent.
pub fn cells_for_box(b: &PixelBox, rows: usize, cols: usize, img: ImageSize) -> Vec<usize> {
    let (w, h) = (img.width as f64, img.height as f64);
    let mut out = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let (cx0, cx1) = (c as f64 * w / cols as f64, (c + 1) as f64 * w / cols as f64);
            let (cy0, cy1) = (r as f64 * h / rows as f64, (r + 1) as f64 * h / rows as f64);
            let x0 = b.x0.max(0.0);
            let y0 = b.y0.max(0.0);
            let x1 = b.x1.min(w);
            let y1 = b.y1.min(h);
            if cx0 < x1 && cx1 > x0 && cy0 < y1 && cy1 > y0 {
                out.push(r * cols + c);
            }
        }
    }
    out
}

/// Cell containing a point; points on or beyond the far edge land in the last cell.
pub fn cell_for_point(p: [f64; 2], rows: usize, cols: usize, img: ImageSize) -> usize {
    let mut col = 0;
    while col + 1 < cols && p[0] >= (col + 1) as f64 * img.width as f64 / cols as f64 {
        col += 1;
    }
    let mut row = 0;
    while row + 1 < rows && p[1] >= (row + 1) as f64 * img.height as f64 / rows as f64 {
        row += 1;
    }
    row * cols + col
}

/// The patch multiset a region covers.
pub fn region_multiset(spec: &RegionSpec, rows: usize, cols: usize, img: ImageSize) -> Vec<usize> {
    match spec {
        RegionSpec::Image => (0..rows * cols).collect(),
        RegionSpec::Patch { patch } => vec![patch[0] * cols + patch[1]],
        RegionSpec::Box { bbox } => cells_for_box(bbox, rows, cols, img),
        RegionSpec::BoxSet { boxes } => boxes.iter().flat_map(|b| cells_for_box(b, rows, cols, img)).collect(),
        RegionSpec::Trace { points } => points.iter().map(|p| cell_for_point(*p, rows, cols, img)).collect(),
    }
}

/// Uniform mean over the multiset, accumulated naively.
pub fn mean_of_multiset(grid: &PatchGrid, cells: &[usize]) -> Vec<f64> {
    let mut acc = vec![0.0; grid.dim()];
    for &i in cells {
        for (a, v) in acc.iter_mut().zip(grid.patch(i)) {
            *a += *v as f64;
        }
    }
    acc.iter().map(|a| a / cells.len() as f64).collect()
}

/// `exp(-(a² + b²))` with `a`, `b` evenly spaced over [-1, 1].
pub fn gaussian_unnormalized(rows: usize, cols: usize) -> Vec<f64> {
    let lin = |n: usize| -> Vec<f64> {
        if n == 1 {
            vec![0.0]
        } else {
            (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect()
        }
    };
    let (ys, xs) = (lin(rows), lin(cols));
    ys.iter().flat_map(|b| xs.iter().map(move |a| (-(a * a) - b * b).exp())).collect()
}

pub fn random_grid(rng: &mut impl Rng, max_side: usize, max_dim: usize) -> PatchGrid {
    let rows = rng.random_range(1..=max_side);
    let cols = rng.random_range(1..=max_side);
    let dim = rng.random_range(1..=max_dim);
    let data: Vec<f32> = (0..rows * cols * dim).map(|_| rng.random_range(-4.0f32..4.0)).collect();
    let att: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(0.01f32..1.0)).collect();
    PatchGrid::new(rows, cols, dim, data, (rows as u32 * 14, cols as u32 * 14), 14, Some(att)).unwrap()
}

fn random_box(rng: &mut impl Rng, img: ImageSize) -> PixelBox {
    loop {
        let xs = [rng.random_range(0.0..img.width as f64), rng.random_range(0.0..img.width as f64)];
        let ys = [rng.random_range(0.0..img.height as f64), rng.random_range(0.0..img.height as f64)];
        let b = PixelBox::new(xs[0].min(xs[1]), ys[0].min(ys[1]), xs[0].max(xs[1]), ys[0].max(ys[1]));
        if b.x1 - b.x0 > 1e-3 && b.y1 - b.y0 > 1e-3 {
            return b;
        }
    }
}

/// A random region of any kind inside an image of size `img`.
pub fn random_region(rng: &mut impl Rng, rows: usize, cols: usize, img: ImageSize) -> RegionSpec {
    match rng.random_range(0..5) {
        0 => RegionSpec::Image,
        1 => RegionSpec::Patch { patch: [rng.random_range(0..rows), rng.random_range(0..cols)] },
        2 => RegionSpec::Box { bbox: random_box(rng, img) },
        3 => RegionSpec::BoxSet { boxes: (0..rng.random_range(1..4)).map(|_| random_box(rng, img)).collect() },
        _ => RegionSpec::Trace {
            points: (0..rng.random_range(1..20))
                .map(|_| [rng.random_range(0.0..img.width as f64), rng.random_range(0.0..img.height as f64)])
                .collect(),
        },
    }
}

// ---------------------------------------------------------------- metrics

/// Lowercase, non-alphanumerics to spaces, whitespace split.
pub fn words(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in s.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn grams(ws: &[String], n: usize) -> Vec<Vec<String>> {
    if ws.len() < n {
        return Vec::new();
    }
    (0..=ws.len() - n).map(|i| ws[i..i + n].to_vec()).collect()
}

fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn distinct(list: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

/// CIDEr-D by direct evaluation over explicit n-gram lists.
/// `records` are `(candidate, references)`.
pub fn cider_d(records: &[(String, Vec<String>)]) -> Vec<f64> {
    let n_docs = records.len() as f64;
    let df = |g: &[String]| -> f64 {
        records
            .iter()
            .filter(|(_, refs)| refs.iter().any(|r| count(&grams(&words(r), g.len()), g) > 0))
            .count() as f64
    };
    let vec_of = |text: &str, n: usize| -> Vec<(Vec<String>, f64)> {
        let gs = grams(&words(text), n);
        distinct(&gs).into_iter().map(|g| {
            let tf = count(&gs, &g) as f64;
            let w = tf * (n_docs.ln() - df(&g).max(1.0).ln());
            (g, w)
        }).collect()
    };
    records
        .iter()
        .map(|(cand, refs)| {
            let mut total = 0.0;
            for r in refs {
                let delta = grams(&words(cand), 2).len() as f64 - grams(&words(r), 2).len() as f64;
                let pen = (-delta * delta / 72.0).exp();
                for n in 1..=4 {
                    let hv = vec_of(cand, n);
                    let rv = vec_of(r, n);
                    let norm = |v: &[(Vec<String>, f64)]| v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
                    let mut dot = 0.0;
                    for (g, h) in &hv {
                        if let Some((_, rw)) = rv.iter().find(|(rg, _)| rg == g) {
                            dot += h.min(*rw) * rw;
                        }
                    }
                    let (nh, nr) = (norm(&hv), norm(&rv));
                    if nh != 0.0 && nr != 0.0 {
                        dot /= nh * nr;
                    }
                    total += dot * pen;
                }
            }
            total / 4.0 / refs.len() as f64 * 10.0
        })
        .collect()
}

/// Corpus BLEU-4 from explicit clipped counts.
pub fn bleu4(records: &[(String, Vec<String>)]) -> f64 {
    let mut num = [0usize; 4];
    let mut den = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refs) in records {
        let cw = words(cand);
        let rws: Vec<Vec<String>> = refs.iter().map(|r| words(r)).collect();
        for n in 1..=4 {
            let cg = grams(&cw, n);
            for g in distinct(&cg) {
                let best = rws.iter().map(|rw| count(&grams(rw, n), &g)).max().unwrap_or(0);
                num[n - 1] += count(&cg, &g).min(best);
            }
            den[n - 1] += cg.len();
        }
        c_len += cw.len();
        let mut best = rws[0].len();
        for rw in &rws {
            let (d, bd) = ((rw.len() as i64 - cw.len() as i64).abs(), (best as i64 - cw.len() as i64).abs());
            if d < bd || (d == bd && rw.len() < best) {
                best = rw.len();
            }
        }
        r_len += best;
    }
    if num.iter().chain(den.iter()).any(|&x| x == 0) {
        return 0.0;
    }
    let geo = (0..4).map(|i| num[i] as f64 / den[i] as f64).product::<f64>().powf(0.25);
    let bp = if c_len < r_len { (1.0 - r_len as f64 / c_len as f64).exp() } else { 1.0 };
    bp * geo
}

fn lcs_table(a: &[String], b: &[String]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] { t[i - 1][j - 1] + 1 } else { t[i - 1][j].max(t[i][j - 1]) };
        }
    }
    t[a.len()][b.len()]
}

/// Per-record ROUGE-L with β = 1.2 over best precision and best recall.
pub fn rouge_l(records: &[(String, Vec<String>)]) -> Vec<f64> {
    records
        .iter()
        .map(|(cand, refs)| {
            let cw = words(cand);
            let mut p: f64 = 0.0;
            let mut r: f64 = 0.0;
            for rf in refs {
                let rw = words(rf);
                if cw.is_empty() || rw.is_empty() {
                    continue;
                }
                let l = lcs_table(&cw, &rw) as f64;
                p = p.max(l / cw.len() as f64);
                r = r.max(l / rw.len() as f64);
            }
            if p == 0.0 || r == 0.0 {
                0.0
            } else {
                let b = 1.2f64 * 1.2;
                (1.0 + b) * p * r / (r + b * p)
            }
        })
        .collect()
}

const WORDS: [&str; 14] =
    ["a", "dog", "cat", "runs", "on", "the", "grass", "red", "car", "two", "men", "ride", "horses", "near"];

/// Random caption of 0..=9 words from a small vocabulary, with occasional punctuation.
pub fn random_caption(rng: &mut impl Rng) -> String {
    let n = rng.random_range(0..10);
    let mut s: Vec<String> = (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string()).collect();
    if n > 0 && rng.random_bool(0.3) {
        s.last_mut().unwrap().push('.');
    }
    if n > 0 && rng.random_bool(0.2) {
        s[0] = s[0].to_uppercase();
    }
    s.join(" ")
}

/// Random fixture of 1..=5 records with 1..=3 nonempty references each.
pub fn random_fixture(rng: &mut impl Rng) -> Vec<(String, Vec<String>)> {
    (0..rng.random_range(1..=5))
        .map(|_| {
            let refs = (0..rng.random_range(1..=3))
                .map(|_| loop {
                    let c = random_caption(rng);
                    if !c.is_empty() {
                        break c;
                    }
                })
                .collect::<Vec<_>>();
            let cand = if rng.random_bool(0.3) { refs[0].clone() } else { random_caption(rng) };
            (cand, refs)
        })
        .collect()
}
