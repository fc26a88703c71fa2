//! Manual timing probe for the training step cost. Run with
//! `cargo test -p tsf-core --test perf_probe -- --ignored --nocapture`.

use std::time::Instant;

use tsf_core::backbone::ParamBindings;
use tsf_core::codec::make_task_code;
use tsf_core::fusion::{synthesize_on_graph, ModelParams, Trainability};
use tsf_core::graph::Graph;
use tsf_core::losses::{reconstruction_on_graph, FrozenFeatureNet, LossWeights};
use tsf_core::rng::Rng;
use tsf_core::tensor::Tensor;

fn rand_image(rng: &mut Rng, h: usize, w: usize) -> Tensor<f32> {
    let data = (0..h * w).map(|_| rng.range(-1.0, 1.0) as f32).collect();
    Tensor::from_vec(&[1, h, w], data).unwrap()
}

#[test]
#[ignore]
fn time_finetune_step() {
    let model = ModelParams::<f32>::new(7, 4, 32);
    let net = FrozenFeatureNet::<f32>::new(11);
    let mut rng = Rng::new(5);
    let imgs: Vec<Option<Tensor<f32>>> = vec![
        Some(rand_image(&mut rng, 64, 64)),
        None,
        Some(rand_image(&mut rng, 64, 64)),
        Some(rand_image(&mut rng, 64, 64)),
    ];
    let tgt = rand_image(&mut rng, 64, 64);
    let code = make_task_code(&[0, 2, 3], 1, 4).unwrap();
    let train = Trainability {
        encoder: false,
        decoder: true,
        fusion: true,
        attention: true,
    };

    let reps = 20;
    let start = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let mut binds = ParamBindings::new();
        let sg =
            synthesize_on_graph(&mut g, &mut binds, &model, &imgs, &code, train).unwrap();
        let nn = net.bind(&mut g);
        let tgt_n = g.constant(tgt.clone());
        let loss =
            reconstruction_on_graph(&mut g, &nn, sg.x_plain, sg.x_attended, tgt_n, LossWeights::default())
                .unwrap();
        let grads = g.backward(loss.total).unwrap();
        std::hint::black_box(&grads);
    }
    let dt = start.elapsed().as_secs_f64() / reps as f64;
    println!("finetune-like step: {:.1} ms  (10k steps ≈ {:.1} min)", dt * 1e3, dt * 10_000.0 / 60.0);

    let start = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let mut binds = ParamBindings::new();
        let code1 = make_task_code(&[0], 1, 4).unwrap();
        let img1: Vec<Option<Tensor<f32>>> =
            vec![Some(rand_image(&mut rng, 64, 64)), None, None, None];
        let train1 = Trainability {
            encoder: true,
            decoder: true,
            fusion: false,
            attention: false,
        };
        let sg = synthesize_on_graph(&mut g, &mut binds, &model, &img1, &code1, train1).unwrap();
        let nn = net.bind(&mut g);
        let tgt_n = g.constant(tgt.clone());
        let loss = reconstruction_on_graph(&mut g, &nn, sg.x_plain, sg.x_attended, tgt_n, LossWeights::default()).unwrap();
        let grads = g.backward(loss.total).unwrap();
        std::hint::black_box(&grads);
    }
    let dt = start.elapsed().as_secs_f64() / reps as f64;
    println!("pretrain-ish step (1 input, fusion path): {:.1} ms  (20k ≈ {:.1} min)", dt * 1e3, dt * 20_000.0 / 60.0);
}
