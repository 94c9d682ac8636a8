//! Brute-force reference implementations shared by test targets.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use zsad_core::Mask;

/// Scores drawn from a small lattice half the time so ties are common.
pub fn instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let n = rng.random_range(2..=64);
    let coarse = rng.random_bool(0.5);
    let mut labels: Vec<u8> = (0..n).map(|_| rng.random_bool(0.4) as u8).collect();
    labels[0] = 1;
    labels[1] = 0;
    labels.shuffle(rng);
    let scores = (0..n)
        .map(|_| if coarse { f64::from(rng.random_range(0..6u8)) / 5.0 } else { rng.random::<f64>() })
        .collect();
    (scores, labels)
}

pub fn pair_count_auroc(s: &[f64], y: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] == 1 && y[j] == 0 {
                pairs += 1.0;
                if s[i] > s[j] {
                    wins += 1.0;
                } else if s[i] == s[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

pub fn confusion(s: &[f64], y: &[u8], t: f64) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    for (&v, &l) in s.iter().zip(y) {
        match (v >= t, l == 1) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fneg += 1.0,
            _ => {}
        }
    }
    (tp, fp, fneg)
}

pub fn distinct_desc(s: &[f64]) -> Vec<f64> {
    let mut t = s.to_vec();
    t.sort_by(|a, b| b.partial_cmp(a).unwrap());
    t.dedup();
    t
}

pub fn sweep_f1(s: &[f64], y: &[u8]) -> f64 {
    distinct_desc(s)
        .into_iter()
        .map(|t| {
            let (tp, fp, fneg) = confusion(s, y, t);
            if tp == 0.0 {
                0.0
            } else {
                let p = tp / (tp + fp);
                let r = tp / (tp + fneg);
                2.0 * p * r / (p + r)
            }
        })
        .fold(0.0, f64::max)
}

pub fn sweep_ap(s: &[f64], y: &[u8]) -> f64 {
    let pos = y.iter().filter(|&&l| l == 1).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in distinct_desc(s) {
        let (tp, fp, _) = confusion(s, y, t);
        let recall = tp / pos;
        if tp > 0.0 {
            ap += (recall - prev_recall) * tp / (tp + fp);
        }
        prev_recall = recall;
    }
    ap
}

/// Union-find 4-connectivity labels, renumbered by first appearance.
pub fn regions(mask: &Mask) -> Vec<Vec<usize>> {
    let (h, w) = (mask.height, mask.width);
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if mask.data[i] == 0 {
                continue;
            }
            if c + 1 < w && mask.data[i + 1] == 1 {
                let (a, b) = (find(&mut parent, i), find(&mut parent, i + 1));
                parent[a] = b;
            }
            if r + 1 < h && mask.data[i + w] == 1 {
                let (a, b) = (find(&mut parent, i), find(&mut parent, i + w));
                parent[a] = b;
            }
        }
    }
    let mut roots: Vec<usize> = Vec::new();
    let mut out: Vec<Vec<usize>> = Vec::new();
    for i in 0..h * w {
        if mask.data[i] == 1 {
            let root = find(&mut parent, i);
            match roots.iter().position(|&x| x == root) {
                Some(k) => out[k].push(i),
                None => {
                    roots.push(root);
                    out.push(vec![i]);
                }
            }
        }
    }
    out
}

pub fn brute_pro(maps: &[Vec<f64>], masks: &[Mask], limit: f64) -> f64 {
    let comps: Vec<Vec<Vec<usize>>> = masks.iter().map(regions).collect();
    let n_regions: usize = comps.iter().map(Vec::len).sum();
    let negatives: usize = masks.iter().map(|m| m.data.iter().filter(|&&v| v == 0).count()).sum();
    let pooled: Vec<f64> = maps.iter().flatten().copied().collect();
    let mut curve = vec![(0.0, 0.0)];
    for t in distinct_desc(&pooled) {
        let mut fp = 0;
        let mut overlap = 0.0;
        for ((map, mask), regs) in maps.iter().zip(masks).zip(&comps) {
            fp += map.iter().zip(&mask.data).filter(|(v, m)| **v >= t && **m == 0).count();
            for reg in regs {
                overlap += reg.iter().filter(|&&i| map[i] >= t).count() as f64 / reg.len() as f64;
            }
        }
        curve.push((fp as f64 / negatives as f64, overlap / n_regions as f64));
    }
    let mut area = 0.0;
    let mut last = (0.0, 0.0);
    for w in curve.windows(2) {
        if w[1].0 > limit {
            break;
        }
        area += (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0;
        last = w[1];
    }
    area += (limit - last.0) * last.1;
    area / limit
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> Mask {
    Mask { height: h, width: w, data: (0..h * w).map(|_| rng.random_bool(density) as u8).collect() }
}

pub fn pro_instance(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<Mask>) {
    loop {
        let n_img = rng.random_range(1..=3);
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let coarse = rng.random_bool(0.5);
        let masks: Vec<Mask> = (0..n_img)
            .map(|_| {
                let density = rng.random_range(0.1..0.5);
                random_mask(rng, h, w, density)
            })
            .collect();
        let maps: Vec<Vec<f64>> = masks
            .iter()
            .map(|m| {
                m.data
                    .iter()
                    .map(|&v| {
                        let base = if coarse { f64::from(rng.random_range(0..5u8)) / 4.0 } else { rng.random::<f64>() };
                        if rng.random_bool(0.5) { (base + 0.3 * f64::from(v)).min(1.0) } else { base }
                    })
                    .collect()
            })
            .collect();
        let any_fg = masks.iter().any(Mask::any);
        let any_bg = masks.iter().any(|m| m.data.contains(&0));
        if any_fg && any_bg {
            return (maps, masks);
        }
    }
}
