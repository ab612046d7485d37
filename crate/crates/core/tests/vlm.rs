use loraloop::numcore::{RngStream, Tape, Tensor};
use loraloop::taskgen::{Dataset, PIXELS};
use loraloop::vlm::{argmax, DualEncoder, VlmConfig};

const CLASSES: [&str; 2] = ["stripes-f1-p0", "dots-f2-p1"];

fn probabilities_for_sims(vlm: &DualEncoder, sims: [f64; 2]) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars = vlm.bind(&mut tape, false).unwrap();
    let z = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
    let rows: Vec<f64> = sims.iter().flat_map(|&s| [s, (1.0 - s * s).sqrt()]).collect();
    let w = tape.constant(Tensor::new(vec![2, 2], rows).unwrap());
    let logits = vlm.logits(&mut tape, &vars, z, w).unwrap();
    let p = tape.softmax(logits);
    tape.value(p).data().to_vec()
}

#[test]
fn two_class_softmax_oracle() {
    let mut vlm = DualEncoder::new(VlmConfig::default(), 0).unwrap();
    vlm.set_tau(1.0).unwrap();
    let p = probabilities_for_sims(&vlm, [0.8, 0.2]);
    let expected = 1.0 / (1.0 + (-0.6f64).exp());
    assert!((p[0] - expected).abs() < 1e-12, "{} vs {expected}", p[0]);
    assert!((expected - 0.64566).abs() < 1e-5);
}

#[test]
fn larger_tau_flattens_the_distribution() {
    let mut vlm = DualEncoder::new(VlmConfig::default(), 0).unwrap();
    let mut prev = f64::INFINITY;
    for tau in [0.1, 1.0, 10.0] {
        vlm.set_tau(tau).unwrap();
        let p = probabilities_for_sims(&vlm, [0.8, 0.2]);
        assert!(p[0] < prev && p[0] > 0.5, "τ={tau}: {}", p[0]);
        prev = p[0];
    }
    assert!((prev - 0.5).abs() < 0.02);
}

/// Two classes lit on opposite halves of the image.
fn separable(n: usize, rng: &mut RngStream) -> Dataset {
    let mut data = Vec::with_capacity(2 * n * PIXELS);
    let mut labels = Vec::with_capacity(2 * n);
    for i in 0..2 * n {
        let label = i % 2;
        for p in 0..PIXELS {
            let left = p % 16 < 8;
            let lit = if label == 0 { left } else { !left };
            data.push(if lit { 0.8 } else { 0.2 } + 0.05 * rng.normal());
        }
        labels.push(label);
    }
    Dataset {
        images: Tensor::new(vec![2 * n, PIXELS], data).unwrap(),
        labels,
    }
}

#[test]
fn separable_toy_set_is_learned_in_fifty_steps() {
    let mut rng = RngStream::new(3, 0);
    let data = separable(16, &mut rng);
    let mut vlm = DualEncoder::new(VlmConfig::default(), 3).unwrap();
    vlm.pretrain(&data, &CLASSES, 50, 32, &mut rng).unwrap();
    assert_eq!(vlm.evaluate_accuracy(&data, &CLASSES).unwrap(), 1.0);
}

#[test]
fn accuracy_matches_a_per_sample_argmax_table() {
    let mut rng = RngStream::new(4, 0);
    let mut data = separable(5, &mut rng);
    data.labels = vec![0, 1, 1, 0, 0, 1, 0, 1, 1, 1];
    let classes = ["stripes-f1-p0", "dots-f2-p1", "rings-f3-p2"];
    let mut vlm = DualEncoder::new(VlmConfig::default(), 4).unwrap();
    vlm.ensure_classes(&classes).unwrap();
    let p = vlm.class_probabilities(&data.images, &classes).unwrap();
    let table: Vec<usize> = (0..10).map(|i| argmax(p.row(i))).collect();
    let hits = table.iter().zip(&data.labels).filter(|(a, b)| a == b).count();
    assert_eq!(vlm.predict(&data.images, &classes).unwrap(), table);
    assert_eq!(vlm.evaluate_accuracy(&data, &classes).unwrap(), hits as f64 / 10.0);
}
