use fltop::nn::{self, Activation, ArchSpec, Batch, LayerSpec, Loss, Matrix, WeightVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_batch(arch: &ArchSpec, rows: usize, rng: &mut ChaCha8Rng) -> Batch {
    let inputs: Vec<f64> = (0..rows * arch.input_width()).map(|_| rng.random::<f64>()).collect();
    let out = arch.output_width();
    let mut targets = vec![0.0; rows * out];
    for r in 0..rows {
        if out == 1 {
            targets[r] = rng.random_range(0..2) as f64;
        } else {
            targets[r * out + rng.random_range(0..out)] = 1.0;
        }
    }
    Batch::new(
        Matrix::new(rows, arch.input_width(), inputs).unwrap(),
        Matrix::new(rows, out, targets).unwrap(),
    )
    .unwrap()
}

fn loss(arch: &ArchSpec, w: &[f64], b: &Batch) -> f64 {
    nn::forward_loss(arch, &WeightVector::new(w.to_vec()), b).unwrap().0
}

/// Central differences with step `h`; returns the worst violation of
/// `|g - fd| <= rel * max(|g|, |fd|) + abs`.
fn check(arch: &ArchSpec, seed: u64, rel: f64, abs: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = nn::init_model(arch, seed).into_vec();
    // nonzero biases so every parameter matters
    for v in &mut w {
        *v += rng.random_range(-0.1..0.1);
    }
    let b = random_batch(arch, 7, &mut rng);
    let g = nn::gradient(arch, &WeightVector::new(w.clone()), &b).unwrap();
    let h = 1e-5;
    for i in 0..w.len() {
        let mut plus = w.clone();
        plus[i] += h;
        let mut minus = w.clone();
        minus[i] -= h;
        let fd = (loss(arch, &plus, &b) - loss(arch, &minus, &b)) / (2.0 * h);
        let tol = rel * g[i].abs().max(fd.abs()) + abs;
        assert!((g[i] - fd).abs() <= tol, "coordinate {i}: backprop {} vs fd {fd}", g[i]);
    }
}

#[test]
fn ten_parameter_toy_net() {
    let arch = ArchSpec::mlp(&[1, 3, 1], Activation::Sigmoid, Loss::BinaryCrossEntropy).unwrap();
    assert_eq!(arch.param_count(), 10);
    check(&arch, 1, 1e-5, 1e-8);
}

#[test]
fn random_architectures_match_finite_differences() {
    let archs = [
        ArchSpec::mlp(&[5, 7, 3], Activation::Sigmoid, Loss::CrossEntropy).unwrap(),
        ArchSpec::mlp(&[4, 6, 5, 1], Activation::Relu, Loss::BinaryCrossEntropy).unwrap(),
        ArchSpec::mlp(&[6, 3, 4, 4], Activation::Identity, Loss::CrossEntropy).unwrap(),
    ];
    for (i, a) in archs.iter().enumerate() {
        check(a, 10 + i as u64, 1e-4, 1e-7);
    }
}

#[test]
fn hand_built_layers_match_finite_differences() {
    let arch = ArchSpec::new(
        vec![
            LayerSpec {
                input_width: 3,
                output_width: 4,
                activation: Activation::Relu,
            },
            LayerSpec {
                input_width: 4,
                output_width: 2,
                activation: Activation::Softmax,
            },
        ],
        Loss::CrossEntropy,
    )
    .unwrap();
    check(&arch, 99, 1e-4, 1e-7);
}

#[test]
fn sgd_lowers_loss_on_separable_data() {
    let arch = ArchSpec::mlp(&[2, 1], Activation::Identity, Loss::BinaryCrossEntropy).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows = 200;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for _ in 0..rows {
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        x.extend([a, b]);
        y.push(if a > b { 1.0 } else { 0.0 });
    }
    let data = Batch::new(Matrix::new(rows, 2, x).unwrap(), Matrix::new(rows, 1, y).unwrap()).unwrap();
    let w = nn::init_model(&arch, 3);
    let before = nn::forward_loss(&arch, &w, &data).unwrap().0;
    let after_w = nn::sgd(&arch, &data, &w, 100, 0.5, 20, 8).unwrap();
    let after = nn::forward_loss(&arch, &after_w, &data).unwrap().0;
    assert!(after < before, "{after} !< {before}");
}
