//! Direct re-computations from definitions, kept free of library code.

/// `−log softmax(z)[t]` with a naive exponent sum.
pub fn ce(row: &[f64], target: usize) -> f64 {
    let z: f64 = row.iter().map(|v| v.exp()).sum();
    -(row[target].exp() / z).ln()
}

/// Mean of `ce` over rows where `keep` holds; 0 when none do.
pub fn masked_ce(rows: &[Vec<f64>], targets: &[usize], keep: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for i in 0..rows.len() {
        if keep[i] {
            sum += ce(&rows[i], targets[i]);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn huber(delta: f64) -> f64 {
    if delta.abs() < 1.0 {
        0.5 * delta * delta
    } else {
        delta.abs() - 0.5
    }
}

/// Average lagging straight from its definition; `ref_len` selects the LAAL rate.
pub fn lagging(d: &[f64], x: f64, rate_len: usize) -> f64 {
    let mut tau = d.len();
    for (i, di) in d.iter().enumerate() {
        if *di >= x {
            tau = i + 1;
            break;
        }
    }
    let mut total = 0.0;
    for i in 1..=tau {
        total += d[i - 1] - (i - 1) as f64 * x / rate_len as f64;
    }
    total / tau as f64
}

/// Wait-k delay of 0-based target `i`: read `k` chunks, then `ratio` tokens per chunk.
pub fn waitk_delay(i: usize, k: usize, ratio: f64, chunks: usize) -> usize {
    let c = k - 1 + ((i + 1) as f64 / ratio).ceil() as usize;
    c.min(chunks)
}

fn ngrams(t: &[usize], n: usize) -> Vec<Vec<usize>> {
    if t.len() < n {
        return Vec::new();
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

/// Corpus BLEU-4 with clipped counts found by linear search.
pub fn bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> f64 {
    let mut m = [0.0; 4];
    let mut tot = [0.0; 4];
    let (mut c, mut r) = (0.0, 0.0);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len() as f64;
        r += rf.len() as f64;
        for n in 1..=4 {
            let hg = ngrams(h, n);
            let mut rg = ngrams(rf, n);
            tot[n - 1] += hg.len() as f64;
            for g in hg {
                if let Some(pos) = rg.iter().position(|x| *x == g) {
                    rg.remove(pos);
                    m[n - 1] += 1.0;
                }
            }
        }
    }
    if c == 0.0 {
        return 0.0;
    }
    let mut logsum = 0.0;
    for n in 0..4 {
        let p = if m[n] == 0.0 {
            1.0 / (tot[n] + 1.0)
        } else {
            m[n] / tot[n]
        };
        logsum += p.ln();
    }
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    100.0 * bp * (logsum / 4.0).exp()
}
