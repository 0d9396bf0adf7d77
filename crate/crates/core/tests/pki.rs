use mccl::pki::{build_adjacency, classify, fallback_embedding, fallback_label_embeddings, gcn_forward};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

#[test]
fn adjacency_matches_pairwise_cosine_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let e = random(&mut rng, 4, 6);
    let a = build_adjacency(&e).unwrap();
    let mut want = Array2::<f64>::zeros((4, 4));
    for i in 0..4 {
        for j in 0..4 {
            let (mut dot, mut ni, mut nj) = (0.0, 0.0, 0.0);
            for d in 0..6 {
                dot += e[[i, d]] * e[[j, d]];
                ni += e[[i, d]] * e[[i, d]];
                nj += e[[j, d]] * e[[j, d]];
            }
            want[[i, j]] = if i == j { 1.0 } else { (dot / (ni.sqrt() * nj.sqrt())).max(0.0) };
        }
        let s: f64 = want.row(i).sum();
        for j in 0..4 {
            want[[i, j]] /= s;
        }
    }
    assert!((&a - &want).iter().all(|d| d.abs() < 1e-6));
}

#[test]
fn gcn_matches_explicit_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let e = random(&mut rng, 3, 4);
    let a = build_adjacency(&e).unwrap();
    let w1 = random(&mut rng, 4, 5);
    let w2 = random(&mut rng, 5, 2);
    let h = a.dot(&e).dot(&w1).mapv(|v| if v > 0.0 { v } else { 0.2 * v });
    let want = a.dot(&h).dot(&w2);
    let got = gcn_forward(&e, &a, &w1, &w2).unwrap();
    assert!((&got - &want).iter().all(|d| d.abs() < 1e-6));
}

#[test]
fn uniform_adjacency_collapses_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let e = random(&mut rng, 3, 4);
    let a = Array2::from_elem((3, 3), 1.0 / 3.0);
    let out = gcn_forward(&e, &a, &random(&mut rng, 4, 4), &random(&mut rng, 4, 4)).unwrap();
    for r in 1..3 {
        assert!((&out.row(r) - &out.row(0)).iter().all(|d| d.abs() < 1e-12));
    }
}

#[test]
fn fallback_embeddings_are_deterministic_and_spread() {
    assert_eq!(fallback_embedding("EnjoyLife", 64), fallback_embedding("EnjoyLife", 64));
    let labels: Vec<String> = (0..28).map(|i| format!("intent_{i:02}")).collect();
    let e = fallback_label_embeddings(&labels, 512);
    let g = e.dot(&e.t());
    for i in 0..28 {
        assert!((g[[i, i]] - 1.0).abs() < 1e-12);
        for j in 0..i {
            assert!(g[[i, j]].abs() < 0.5);
        }
    }
    assert_eq!(e.len_of(Axis(0)), 28);
}

#[test]
fn head_widths_and_sigmoid_oracle() {
    let (c, s, d) = (3, 2, 64);
    let blocks: Vec<Array2<f64>> = (0..2 * s).map(|_| Array2::zeros((c, d))).collect();
    let weight = Array2::zeros((c, 2 * s * d));
    assert_eq!(weight.ncols(), 256);
    let bias = vec![10.0; c];
    let p = classify(&weight, &bias, &blocks).unwrap();
    let want = 1.0 / (1.0 + (-10.0f64).exp());
    assert!(p.iter().all(|v| (v - want).abs() < 1e-12));
}
