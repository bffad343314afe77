//! Brute-force reference implementations used to check the library.

#![allow(dead_code)]

use ndarray::ArrayView2;

fn dist(x: &ArrayView2<f64>, i: usize, j: usize) -> f64 {
    let mut s = 0.0;
    for k in 0..x.ncols() {
        let d = x[[i, k]] - x[[j, k]];
        s += d * d;
    }
    s.sqrt()
}

/// Mean silhouette by direct O(n^2) enumeration of every pair.
pub fn silhouette(x: &ArrayView2<f64>, labels: &[usize]) -> f64 {
    let n = labels.len();
    let classes: Vec<usize> = {
        let mut c = labels.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    let mut total = 0.0;
    for i in 0..n {
        let mut a_sum = 0.0;
        let mut a_cnt = 0.0;
        let mut b = f64::INFINITY;
        for &c in &classes {
            let mut s = 0.0;
            let mut cnt = 0.0;
            for j in 0..n {
                if labels[j] == c && j != i {
                    s += dist(x, i, j);
                    cnt += 1.0;
                }
            }
            if c == labels[i] {
                a_sum = s;
                a_cnt = cnt;
            } else if s / cnt < b {
                b = s / cnt;
            }
        }
        let a = a_sum / a_cnt;
        let m = if a > b { a } else { b };
        total += if m == 0.0 { 0.0 } else { (b - a) / m };
    }
    total / n as f64
}

fn centroid(x: &ArrayView2<f64>, labels: &[usize], c: usize) -> Vec<f64> {
    let mut m = vec![0.0; x.ncols()];
    let mut cnt = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        if l == c {
            for k in 0..x.ncols() {
                m[k] += x[[i, k]];
            }
            cnt += 1.0;
        }
    }
    m.iter().map(|v| v / cnt).collect()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
}

pub fn davies_bouldin(x: &ArrayView2<f64>, labels: &[usize]) -> f64 {
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let cents: Vec<Vec<f64>> = classes.iter().map(|&c| centroid(x, labels, c)).collect();
    let scatter: Vec<f64> = classes
        .iter()
        .zip(&cents)
        .map(|(&c, m)| {
            let pts: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            pts.iter().map(|&i| euclid(&x.row(i).to_vec(), m)).sum::<f64>() / pts.len() as f64
        })
        .collect();
    let k = classes.len();
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = 0.0f64;
        for j in 0..k {
            if i != j {
                worst = worst.max((scatter[i] + scatter[j]) / euclid(&cents[i], &cents[j]));
            }
        }
        total += worst;
    }
    total / k as f64
}

/// W1 for samples of sizes n and m: replicate each sample to size n*m so
/// the quantile functions become sorted arrays of equal length.
pub fn wasserstein_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let mut ra: Vec<f64> = a.iter().flat_map(|&v| std::iter::repeat_n(v, m)).collect();
    let mut rb: Vec<f64> = b.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
    ra.sort_by(f64::total_cmp);
    rb.sort_by(f64::total_cmp);
    ra.iter().zip(&rb).map(|(u, v)| (u - v).abs()).sum::<f64>() / (n * m) as f64
}

/// Mann-Whitney enumeration over all (positive, negative) pairs; ties 1/2.
pub fn pairwise_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if positive[i] && !positive[j] {
                pairs += 1.0;
                if si > sj {
                    num += 1.0;
                } else if si == sj {
                    num += 0.5;
                }
            }
        }
    }
    num / pairs
}

/// Threshold maximizing between-class variance, scanning every midpoint
/// between consecutive sorted values.
pub fn otsu_scan(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut best = (f64::NEG_INFINITY, 0.0);
    for k in 1..v.len() {
        if v[k] == v[k - 1] {
            continue;
        }
        let lo = &v[..k];
        let hi = &v[k..];
        let (w0, w1) = (lo.len() as f64 / n, hi.len() as f64 / n);
        let m0 = lo.iter().sum::<f64>() / lo.len() as f64;
        let m1 = hi.iter().sum::<f64>() / hi.len() as f64;
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if var > best.0 {
            best = (var, 0.5 * (v[k - 1] + v[k]));
        }
    }
    best.1
}

/// 4-connected foreground components by flood fill.
pub fn count_components(width: usize, height: usize, bits: &[bool]) -> usize {
    let mut seen = vec![false; bits.len()];
    let mut count = 0;
    for start in 0..bits.len() {
        if !bits[start] || seen[start] {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            let (x, y) = (p % width, p / width);
            let mut push = |q: usize| {
                if bits[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < width {
                push(p + 1);
            }
            if y > 0 {
                push(p - width);
            }
            if y + 1 < height {
                push(p + width);
            }
        }
    }
    count
}
