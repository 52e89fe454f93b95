use desklm::model::{LoraSpec, Model, ModelConfig};
use desklm::textprep::Batch;

fn config() -> ModelConfig {
    ModelConfig {
        vocab_size: 13,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 16,
        max_seq_len: 8,
        seed: 17,
    }
}

fn batch() -> Batch {
    Batch {
        rows: vec![vec![3, 7, 1, 12, 5, 9], vec![4, 4, 8, 2, 0, 0]],
        attention_mask: vec![vec![1; 6], vec![1, 1, 1, 1, 0, 0]],
    }
}

/// Central differences over every trainable element; returns the worst
/// |g − g_fd| / (|g_fd| + 1e-8).
fn worst_relative_error(model: &Model<f64>, batch: &Batch) -> f64 {
    let (_, grads) = model.backward(batch, None).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (name, _) in model.trainable_shapes() {
        let analytic = grads.get(&name).unwrap().data().to_vec();
        for (i, &g) in analytic.iter().enumerate() {
            let mut plus = model.clone();
            let mut minus = model.clone();
            for (n, t) in plus.trainable_tensors_mut() {
                if n == name {
                    t.data_mut()[i] += h;
                }
            }
            for (n, t) in minus.trainable_tensors_mut() {
                if n == name {
                    t.data_mut()[i] -= h;
                }
            }
            let fd = (plus.loss(batch).unwrap() - minus.loss(batch).unwrap()) / (2.0 * h);
            let rel = (g - fd).abs() / (fd.abs() + 1e-8);
            if rel > worst {
                worst = rel;
                eprintln!("{name}[{i}] analytic {g:e} fd {fd:e}");
            }
        }
    }
    worst
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let model = Model::<f64>::init(config()).unwrap();
    let worst = worst_relative_error(&model, &batch());
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn adapter_gradients_match_finite_differences() {
    let mut model = Model::<f64>::init(config()).unwrap();
    model
        .attach_lora(&LoraSpec {
            dropout_p: 0.0,
            ..LoraSpec::default()
        })
        .unwrap();
    // Move B off zero so gradients reach A.
    for (name, t) in model.trainable_tensors_mut() {
        if name.ends_with("lora_B") {
            let n = t.len();
            t.data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, x)| *x = ((i * 7 + n) % 11) as f64 * 0.03 - 0.15);
        }
    }
    let worst = worst_relative_error(&model, &batch());
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}
