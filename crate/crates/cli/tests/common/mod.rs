//! Brute-force metric oracles shared by the integration tests. They work on
//! plain vectors and do not call into the metric code they check.

#![allow(dead_code)]

use std::collections::BTreeSet;

/// Area under the precision envelope, enumerating every cutoff of the
/// ranking explicitly.
pub fn oracle_ap(hits: &[bool], num_gt: usize) -> f64 {
    let mut curve = Vec::new();
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        curve.push((tp as f64 / (k + 1) as f64, h));
    }
    let mut ap = 0.0;
    for k in 0..curve.len() {
        if curve[k].1 {
            let envelope = curve[k..].iter().map(|c| c.0).fold(f64::MIN, f64::max);
            ap += envelope / num_gt as f64;
        }
    }
    ap
}

/// `(class, score, image)` detections against per-image label sets.
/// Returns `(full, rare, non_rare)`.
pub fn oracle_map(
    dets: &[(usize, f64, usize)],
    gt: &[BTreeSet<usize>],
    rare: &BTreeSet<usize>,
) -> (Option<f64>, Option<f64>, Option<f64>) {
    let classes: BTreeSet<usize> = gt.iter().flatten().copied().collect();
    let mut per_class = Vec::new();
    for &c in &classes {
        let n = gt.iter().filter(|g| g.contains(&c)).count();
        let mut mine: Vec<(f64, usize)> = dets.iter().filter(|d| d.0 == c).map(|d| (d.1, d.2)).collect();
        // highest score first; equal scores by image index
        for i in 0..mine.len() {
            for j in 0..mine.len() - 1 - i {
                let (a, b) = (mine[j], mine[j + 1]);
                if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                    mine.swap(j, j + 1);
                }
            }
        }
        let mut used = vec![false; gt.len()];
        let hits: Vec<bool> = mine
            .iter()
            .map(|&(_, img)| {
                let hit = gt[img].contains(&c) && !used[img];
                if hit {
                    used[img] = true;
                }
                hit
            })
            .collect();
        per_class.push((c, oracle_ap(&hits, n)));
    }
    let mean = |vals: Vec<f64>| {
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    (
        mean(per_class.iter().map(|p| p.1).collect()),
        mean(per_class.iter().filter(|p| rare.contains(&p.0)).map(|p| p.1).collect()),
        mean(per_class.iter().filter(|p| !rare.contains(&p.0)).map(|p| p.1).collect()),
    )
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Repeatedly scans every unmatched pair for the maximum.
pub fn oracle_greedy(sim: &[Vec<f64>]) -> Vec<(usize, usize, f64)> {
    let rows = sim.len();
    let cols = sim.first().map_or(0, Vec::len);
    let mut used_r = vec![false; rows];
    let mut used_c = vec![false; cols];
    let mut out = Vec::new();
    loop {
        let mut best: Option<(usize, usize)> = None;
        for r in 0..rows {
            for c in 0..cols {
                if used_r[r] || used_c[c] {
                    continue;
                }
                if best.is_none_or(|(br, bc)| sim[r][c] > sim[br][bc]) {
                    best = Some((r, c));
                }
            }
        }
        let Some((r, c)) = best else { break };
        used_r[r] = true;
        used_c[c] = true;
        out.push((r, c, sim[r][c]));
    }
    out
}

/// Mean cosine over greedy pairs of every image.
pub fn oracle_identity(refs: &[Vec<Vec<f64>>], gens: &[Vec<Vec<f64>>]) -> Option<f64> {
    let mut all = Vec::new();
    for (r, g) in refs.iter().zip(gens) {
        let sim: Vec<Vec<f64>> = r.iter().map(|a| g.iter().map(|b| dot(a, b)).collect()).collect();
        all.extend(oracle_greedy(&sim).into_iter().map(|p| p.2));
    }
    if all.is_empty() {
        None
    } else {
        Some(all.iter().sum::<f64>() / all.len() as f64)
    }
}

/// One gaze case: gazed labels, labelled boxes `[x0, y0, x1, y1]`, predicted
/// point.
pub type RawGazeCase = (Vec<String>, Vec<(String, [f64; 4])>, Option<[f64; 2]>);

/// `(correct, incorrect, excluded, percent)`.
pub fn oracle_gaze(cases: &[RawGazeCase]) -> (usize, usize, usize, Option<f64>) {
    let (mut c, mut i, mut e) = (0, 0, 0);
    for (targets, boxes, p) in cases {
        if targets.is_empty() {
            e += 1;
            continue;
        }
        let inside = |b: &[f64; 4], p: &[f64; 2]| b[0] <= p[0] && p[0] <= b[2] && b[1] <= p[1] && p[1] <= b[3];
        let ok = p.is_some_and(|p| boxes.iter().any(|(l, b)| targets.contains(l) && inside(b, &p)));
        if ok {
            c += 1;
        } else {
            i += 1;
        }
    }
    let pct = if c + i == 0 {
        None
    } else {
        Some(100.0 * c as f64 / (c + i) as f64)
    };
    (c, i, e, pct)
}
