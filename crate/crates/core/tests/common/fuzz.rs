//! Randomized agreement between the quantizer and the exhaustive-scan oracle.

use rand::Rng;
use shrinklab::matrix::Matrix;
use shrinklab::oracle::exhaustive_nearest;
use shrinklab::quantizer::Codebook;
use shrinklab::rng::{stream, StreamRng};

pub const CASES: u64 = 10_000;

pub struct FuzzOutcome {
    pub cases: u64,
    pub queries: u64,
    pub mismatches: u64,
    pub max_size: usize,
    pub max_dim: usize,
}

/// Each case draws S ≤ 256 tokens in d ≤ 32 dimensions plus a batch of queries.
/// A quarter of the cases plant exact ties: duplicated tokens and queries equal
/// to a token or at the midpoint of two tokens.
pub fn assign_vs_exhaustive(cases: u64) -> FuzzOutcome {
    let mut out = FuzzOutcome {
        cases,
        queries: 0,
        mismatches: 0,
        max_size: 0,
        max_dim: 0,
    };
    for case in 0..cases {
        let mut rng = stream(case, 200);
        let s = rng.gen_range(1..=256);
        let d = rng.gen_range(1..=32);
        out.max_size = out.max_size.max(s);
        out.max_dim = out.max_dim.max(d);
        let ties = case % 4 == 0;
        // a coarse grid makes exact distance ties common in the tie cases
        let draw = |rng: &mut StreamRng| -> f64 {
            if ties {
                rng.gen_range(-2..=2) as f64
            } else {
                rng.gen_range(-3.0..3.0)
            }
        };
        let mut tokens: Vec<Vec<f64>> = (0..s).map(|_| (0..d).map(|_| draw(&mut rng)).collect()).collect();
        if ties && s >= 2 {
            let src = rng.gen_range(0..s);
            let dst = rng.gen_range(0..s);
            tokens[dst] = tokens[src].clone();
        }
        let n = rng.gen_range(1..=16);
        let mut queries: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| draw(&mut rng)).collect()).collect();
        if ties {
            let a = rng.gen_range(0..s);
            let b = rng.gen_range(0..s);
            queries.push(tokens[a].clone());
            queries.push(tokens[a].iter().zip(&tokens[b]).map(|(x, y)| 0.5 * (x + y)).collect());
        }
        let tokens = Matrix::from_rows(&tokens);
        let queries = Matrix::from_rows(&queries);
        let codebook = Codebook::new(tokens.clone(), 0.9, 0.25).unwrap();
        let got = codebook.assign(&queries).unwrap();
        for (q, g) in queries.iter_rows().zip(got) {
            out.queries += 1;
            if exhaustive_nearest(q, &tokens).unwrap() != g {
                out.mismatches += 1;
            }
        }
    }
    out
}
