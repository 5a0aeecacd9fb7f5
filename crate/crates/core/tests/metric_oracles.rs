use proptest::prelude::*;
use tacoxfer::gradcore::Tensor;
use tacoxfer::metrics::{edit_counts, mcd, mer, wer, EditCounts};

/// Every edit script from (i, j) to the end, as (S, D, I, C).
fn all_scripts(r: &[u8], h: &[u8], i: usize, j: usize, acc: EditCounts, out: &mut Vec<EditCounts>) {
    if i == r.len() && j == h.len() {
        out.push(acc);
        return;
    }
    if i < r.len() && j < h.len() {
        let mut a = acc;
        if r[i] == h[j] {
            a.matches += 1;
        } else {
            a.substitutions += 1;
        }
        all_scripts(r, h, i + 1, j + 1, a, out);
    }
    if i < r.len() {
        let mut a = acc;
        a.deletions += 1;
        all_scripts(r, h, i + 1, j, a, out);
    }
    if j < h.len() {
        let mut a = acc;
        a.insertions += 1;
        all_scripts(r, h, i, j + 1, a, out);
    }
}

fn brute(r: &[u8], h: &[u8]) -> EditCounts {
    let mut scripts = Vec::new();
    all_scripts(r, h, 0, 0, EditCounts::default(), &mut scripts);
    let best_e = scripts.iter().map(EditCounts::errors).min().unwrap();
    *scripts
        .iter()
        .filter(|c| c.errors() == best_e)
        .max_by_key(|c| c.substitutions)
        .unwrap()
}

fn tokens() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..3, 0..=6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn dp_matches_exhaustive_search(r in tokens(), h in tokens()) {
        let dp = edit_counts(&r, &h);
        let bf = brute(&r, &h);
        prop_assert_eq!(dp, bf);
        if !r.is_empty() {
            let w = wer(&r, &h).unwrap();
            let m = mer(&r, &h).unwrap();
            prop_assert_eq!(w, bf.wer().unwrap());
            prop_assert_eq!(m, bf.mer().unwrap());
            prop_assert!(m <= w);
            prop_assert!(m <= 1.0);
        }
    }
}

fn idct(c: &[f64]) -> Vec<f64> {
    let n = c.len() as f64;
    (0..c.len())
        .map(|i| {
            c.iter()
                .enumerate()
                .map(|(k, &ck)| {
                    let s = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
                    s * ck * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n).cos()
                })
                .sum()
        })
        .collect()
}

fn mel(frames: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(frames).unwrap()
}

fn frames() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 16), 1..5)
}

proptest! {
    #[test]
    fn mcd_properties(a in frames(), noise in prop::collection::vec(-1.0f64..1.0, 16), lambda in 0.1f64..4.0, offset in -2.0f64..2.0) {
        let t = a.len();
        // cepstral-domain construction: b = a + d, c = a + lambda * d
        let d = noise;
        let ca: Vec<Vec<f64>> = a.clone();
        let cb: Vec<Vec<f64>> = ca.iter().map(|f| f.iter().zip(&d).map(|(x, y)| x + y).collect()).collect();
        let cc: Vec<Vec<f64>> = ca.iter().map(|f| f.iter().zip(&d).map(|(x, y)| x + lambda * y).collect()).collect();
        let ya = mel(&ca.iter().map(|c| idct(c)).collect::<Vec<_>>());
        let yb = mel(&cb.iter().map(|c| idct(c)).collect::<Vec<_>>());
        let yc = mel(&cc.iter().map(|c| idct(c)).collect::<Vec<_>>());

        prop_assert_eq!(mcd(&ya, &ya, 12).unwrap(), 0.0);
        let ab = mcd(&ya, &yb, 12).unwrap();
        prop_assert!((ab - mcd(&yb, &ya, 12).unwrap()).abs() < 1e-9);
        prop_assert!((mcd(&ya, &yc, 12).unwrap() - lambda * ab).abs() < 1e-9);

        // closed form from the cepstral difference
        let want = 10.0 / std::f64::consts::LN_10 * (2.0 * d[1..=12].iter().map(|x| x * x).sum::<f64>()).sqrt();
        prop_assert!((ab - want).abs() < 1e-9);

        let shifted = Tensor::new(vec![t, 16], ya.data().iter().map(|x| x + offset).collect()).unwrap();
        prop_assert!(mcd(&ya, &shifted, 12).unwrap().abs() < 1e-9);
    }
}
