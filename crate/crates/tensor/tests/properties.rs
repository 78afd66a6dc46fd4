use dtmerge_tensor::{AdamW, AdamWConfig, GradMap, Graph, ParameterTree, Tensor};
use proptest::prelude::*;

fn tensor(shape: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-20.0f32..20.0, 24)) {
        let mut g = Graph::new();
        let x = g.constant(tensor(&[4, 6], data)).unwrap();
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(6) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_is_bit_deterministic(data in prop::collection::vec(-3.0f32..3.0, 32), seed in 0u64..1000) {
        let run = || {
            let mut g = Graph::training(seed, 1);
            let x = g.constant(tensor(&[2, 4, 4], data.clone())).unwrap();
            let s = g.bmm(x, x, true).unwrap();
            let p = g.causal_softmax(s).unwrap();
            let p = g.dropout(p, 0.1).unwrap();
            let o = g.bmm(p, x, false).unwrap();
            let o = g.gelu(o).unwrap();
            g.value(o).clone()
        };
        prop_assert!(run().bit_eq(&run()));
    }

    #[test]
    fn frozen_bytes_survive_any_number_of_steps(
        steps in 1usize..20,
        grad in prop::collection::vec(-5.0f32..5.0, 6),
    ) {
        let mut params = ParameterTree::new();
        params.insert("frozen", tensor(&[6], vec![0.5; 6])).unwrap();
        params.insert("live", tensor(&[6], vec![0.5; 6])).unwrap();
        let before = params.get("frozen").unwrap().clone();
        let mut grads = GradMap::new();
        grads.insert("frozen".into(), tensor(&[6], grad.clone()));
        grads.insert("live".into(), tensor(&[6], grad));
        let mut opt = AdamW::new(AdamWConfig::default());
        for _ in 0..steps {
            opt.step(&mut params, &grads, |n| n == "frozen").unwrap();
        }
        prop_assert!(params.get("frozen").unwrap().bit_eq(&before));
    }
}
