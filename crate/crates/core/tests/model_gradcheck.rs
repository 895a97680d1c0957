//! Central-difference check of the whole training objective on a tiny
//! model in 64-bit mode, with dropout masks fixed at graph construction.

use confnmt::data::{generate_corpus, Batch, TaskSpec};
use confnmt::model::{init_model, ModelConfig, SeqModel, TeacherForced};
use confnmt::numerics::{grad_check_graph, ParamSet, RngState};
use confnmt::training::{BatchLoss, Smoothing, TrainSchedule};

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-3;
const POINTS: u64 = 20;

fn tiny(seed: u64) -> (SeqModel, Batch) {
    let cfg = ModelConfig {
        vocab_size: 12,
        d_model: 8,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 2,
        ffn_dim: 8,
        dropout: 0.1,
        conf_layers: vec![1],
        seed,
        ..ModelConfig::default()
    };
    let model = init_model(&cfg, &RngState::new(seed)).unwrap();
    let task = TaskSpec { vocab_size: 12, min_len: 2, max_len: 4, reorder_block: 1, seed, ..TaskSpec::default() };
    let corpus = generate_corpus(&task, 3).unwrap();
    (model, Batch::from_corpus(&corpus, &[0, 1, 2]))
}

/// f64 parameters moved off the initialisation so biases and gains are
/// generic.
fn jittered(model: &SeqModel, rng: &mut RngState) -> ParamSet<f64> {
    let mut ps = model.params().cast::<f64>();
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        for x in ps.get_mut(id).data_mut() {
            *x += 0.1 * rng.normal();
        }
    }
    ps
}

#[test]
fn full_objective_matches_central_differences() {
    for point in 0..POINTS {
        let (model, batch) = tiny(point);
        let mut rng = RngState::new(500 + point);
        let params = jittered(&model, &mut rng);
        let smoothing = if point % 2 == 0 { Smoothing::None } else { Smoothing::Standard };
        let schedule = TrainSchedule { smoothing, total_steps: 100, ..TrainSchedule::default() };
        let mut tf = TeacherForced::build(&model, &params, &batch, true, &mut rng.substream("dropout", 0)).unwrap();
        let loss = BatchLoss::build(&mut tf, &[true, false, true], &schedule, point as usize).unwrap();
        tf.graph.forward(&params).unwrap();
        let grads = tf.graph.backward(loss.total, &params).unwrap();

        // Attention scores are shift-invariant per query, so key biases have
        // an exactly zero gradient and relative error there is pure noise.
        let (key_bias, rest): (Vec<_>, Vec<_>) = params.ids().partition(|&id| params.name(id).ends_with(".k.b"));
        for id in key_bias {
            assert!(grads.get(id).data().iter().all(|g| g.abs() < 1e-10), "{}", params.name(id));
        }
        let coords: Vec<_> = rest.iter().flat_map(|&id| (0..params.get(id).len()).map(move |i| (id, i))).collect();
        let report = grad_check_graph(tf.graph, loss.total, &params, EPS, Some(&coords)).unwrap();
        assert!(report.max_rel_error < TOL, "point {point}: {report:?}");
        assert_eq!(report.checked, coords.len());
    }
}

#[test]
fn confidence_loss_reaches_only_its_path() {
    let (model, batch) = tiny(3);
    let params = model.params().cast::<f64>();
    let schedule = TrainSchedule::default();
    let mut tf = TeacherForced::build(&model, &params, &batch, false, &mut RngState::new(0)).unwrap();
    let loss = BatchLoss::build(&mut tf, &[false; 3], &schedule, 0).unwrap();
    tf.graph.forward(&params).unwrap();
    let grads = tf.graph.backward(loss.conf.unwrap(), &params).unwrap();
    let nonzero = |id| grads.get(id).data().iter().any(|&g: &f64| g != 0.0);

    for id in model.conf_head_params() {
        assert!(nonzero(id), "{}", params.name(id));
    }
    assert!(model.decoder_layer_params(1).into_iter().any(nonzero));
    for id in model.output_params() {
        assert!(!nonzero(id), "{}", params.name(id));
    }
    // the head reads layer 1 only, so layer 2 sees nothing
    assert!(!model.decoder_layer_params(2).into_iter().any(nonzero));
}
