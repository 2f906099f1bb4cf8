use clsdf::asc_sim::{generate_class_sample, SimConfig};

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn mean_distance(a: &[Vec<f32>], b: &[Vec<f32>], same: bool) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            if same && j <= i {
                continue;
            }
            total += l2(x, y);
            n += 1;
        }
    }
    total / n as f64
}

#[test]
fn classes_are_farther_apart_than_their_members() {
    let sim = SimConfig::default();
    let draw = |class: usize| -> Vec<Vec<f32>> {
        (0..100)
            .map(|s| {
                generate_class_sample(class, 1000 + s, &sim)
                    .unwrap()
                    .image
                    .pixels
            })
            .collect()
    };
    let (a, b) = (draw(0), draw(1));
    let intra = 0.5 * (mean_distance(&a, &a, true) + mean_distance(&b, &b, true));
    let inter = mean_distance(&a, &b, false);
    assert!(inter > intra, "inter {inter:.3} intra {intra:.3}");
}

#[test]
fn synthesis_is_bit_identical_across_calls() {
    let sim = SimConfig::default();
    assert_eq!(
        generate_class_sample(0, 7, &sim).unwrap(),
        generate_class_sample(0, 7, &sim).unwrap()
    );
}
