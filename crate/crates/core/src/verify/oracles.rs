//! Plain scalar re-statements of the losses: one loop per formula, no shared
//! helpers with `losses`, every intermediate in f64.

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn bce(logit: f64, y: u8) -> f64 {
    let s = 1.0 / (1.0 + (-logit).exp());
    let s = s.clamp(1e-300, 1.0 - 1e-16);
    if y == 1 {
        -s.ln()
    } else {
        -(1.0 - s).ln()
    }
}

pub fn mlm(logits: &[Vec<f64>], positions: &[usize], targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (&p, &t) in positions.iter().zip(targets) {
        total += log_sum_exp(&logits[p]) - logits[p][t];
    }
    total / positions.len() as f64
}

pub fn mrfr(pred: &[Vec<f64>], positions: &[usize], targets: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (i, &p) in positions.iter().enumerate() {
        for k in 0..pred[p].len() {
            total += (pred[p][k] - targets[i][k]).powi(2);
        }
    }
    total / positions.len() as f64
}

pub fn moc(cat: &[Vec<f64>], attr: &[Vec<f64>], positions: &[usize], ct: &[usize], at: &[usize]) -> f64 {
    mlm(cat, positions, ct) + mlm(attr, positions, at)
}

/// `positions` are the shuffled slots; `k` the number of shuffled triplets.
pub fn ifrs(pred: &[Vec<f64>], positions: &[usize], original: &[Vec<f64>], k: usize) -> f64 {
    let mut total = 0.0;
    for &p in positions {
        for d in 0..pred[p].len() {
            total += (pred[p][d] - original[p][d]).powi(2);
        }
    }
    total / (3 * k).max(1) as f64
}

pub fn topic(logits: &[Vec<f64>], targets: &[Vec<u8>]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (row, ys) in logits.iter().zip(targets) {
        for (&x, &y) in row.iter().zip(ys) {
            total += bce(x, y);
            n += 1;
        }
    }
    total / n as f64
}

pub fn itm(logits: &[f64], labels: &[u8]) -> f64 {
    logits.iter().zip(labels).map(|(&x, &y)| bce(x, y)).sum::<f64>() / labels.len() as f64
}
