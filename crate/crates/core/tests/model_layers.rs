use std::path::Path;
use std::sync::Arc;

use lmpcast::grid::{load_case, LaplacianWeighting, SpectralBasis};
use lmpcast::model::{attention_mask, st_conv_block};
use lmpcast::tensor::{ChebOperators, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Relabelling the nodes relabels the spatial mask: S(Px) = P S(x) Pᵀ when
/// the node-indexed parameters are permuted the same way.
#[test]
fn spatial_mask_follows_node_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, t) = (4, 5);
    let perm = [2, 0, 3, 1];
    let x = random(&mut rng, &[1, n, t]);
    let (w1, w2) = (random(&mut rng, &[t, 1]), random(&mut rng, &[t, 1]));
    let (b, v) = (random(&mut rng, &[n, n]), random(&mut rng, &[n, n]));

    let permute_rows = |m: &Tensor, cols: usize| {
        let d: Vec<f64> = perm.iter().flat_map(|&r| m.data()[r * cols..(r + 1) * cols].to_vec()).collect();
        Tensor::new(m.shape().to_vec(), d).unwrap()
    };
    let permute_both = |m: &Tensor| {
        let d: Vec<f64> = (0..n * n).map(|i| m.data()[perm[i / n] * n + perm[i % n]]).collect();
        Tensor::new(vec![n, n], d).unwrap()
    };
    let mask = |x: Tensor, b: Tensor, v: Tensor| {
        let mut tape = Tape::new();
        let vars = [x, w1.clone(), w2.clone(), b, v].map(|t| tape.leaf(t));
        let m = attention_mask(&mut tape, vars[0], vars[1], vars[2], vars[3], vars[4]).unwrap();
        tape.value(m).clone().reshape(&[n, n]).unwrap()
    };

    let s = mask(x.clone(), b.clone(), v.clone());
    let sp = mask(permute_rows(&x, t), permute_both(&b), permute_both(&v));
    let want = permute_both(&s);
    for (a, e) in sp.data().iter().zip(want.data()) {
        assert!((a - e).abs() < 1e-14, "{sp:?} vs {want:?}");
    }
}

#[test]
fn first_block_on_ieee118_is_24_by_118_by_128() {
    let case = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/cases/ieee118");
    let graph = load_case(&case).unwrap();
    let basis = SpectralBasis::for_graph(&graph, LaplacianWeighting::Binary, 3).unwrap();
    let ops = Arc::new(ChebOperators::new(&basis.cheb_polys));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, t, c) = (118, 24, 128);
    let mut tape = Tape::new();
    let x = tape.leaf(random(&mut rng, &[n, t, 1]));
    let theta = tape.leaf(random(&mut rng, &[3, 1, c]));
    let theta_b = tape.leaf(Tensor::zeros(&[c]));
    let phi = tape.leaf(random(&mut rng, &[3, c, c]));
    let phi_b = tape.leaf(Tensor::zeros(&[c]));
    let y = st_conv_block(&mut tape, x, theta, theta_b, phi, phi_b, &ops, t).unwrap();
    // node-major [N, B*T, C] with one sample
    assert_eq!(tape.shape(y), &[n, t, c]);
    assert!(tape.value(y).data().iter().all(|v| v.is_finite() && *v >= 0.0));
}
