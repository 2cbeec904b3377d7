//! Checkpoint format: save/load bit-identity and state restoration.

#[path = "../src/checkpoint.rs"]
mod checkpoint;

use checkpoint::Checkpoint;
use stabilitylab::model::{init_parameters, ModelConfig};
use stabilitylab::optim::OptimizerState;

fn model() -> ModelConfig {
    ModelConfig {
        model_dim: 16,
        num_layers: 1,
        num_heads: 2,
        head_dim: 8,
        vocab_size: 12,
        context_length: 4,
        ..ModelConfig::default()
    }
}

#[test]
fn save_load_is_bit_identical() {
    let params = init_parameters::<f64>(&model(), 5).unwrap();
    let mut state = OptimizerState::new(&params);
    state.t = 17;
    for v in state.v.iter_mut().flatten() {
        *v = 0.25;
    }
    let dir = tempfile::tempdir().unwrap();
    let path1 = dir.path().join("a.bin");
    let path2 = dir.path().join("b.bin");
    let ck = Checkpoint::from_state(&params, &state);
    ck.save(&path1).unwrap();
    let loaded = Checkpoint::load(&path1).unwrap();
    assert_eq!(loaded.step, 17);
    loaded.save(&path2).unwrap();
    assert_eq!(std::fs::read(&path1).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn restore_reproduces_parameters_and_moments() {
    let params = init_parameters::<f64>(&model(), 9).unwrap();
    let mut state = OptimizerState::new(&params);
    state.t = 3;
    for (i, v) in state.v.iter_mut().enumerate() {
        v.iter_mut().for_each(|x| *x = i as f64 * 0.1);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    Checkpoint::from_state(&params, &state).save(&path).unwrap();

    let mut fresh = init_parameters::<f64>(&model(), 1234).unwrap();
    let mut fresh_state = OptimizerState::new(&fresh);
    Checkpoint::load(&path).unwrap().restore(&mut fresh, &mut fresh_state).unwrap();
    for (a, b) in params.iter().zip(fresh.iter()) {
        assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
    }
    assert_eq!(fresh_state.t, 3);
    assert_eq!(state.v, fresh_state.v);
    assert_eq!(state.u, fresh_state.u);
}

#[test]
fn entry_names_match_parameter_names() {
    let params = init_parameters::<f64>(&model(), 2).unwrap();
    let state = OptimizerState::new(&params);
    let ck = Checkpoint::from_state(&params, &state);
    for p in params.iter() {
        assert!(ck.find(&p.name).is_some(), "missing {}", p.name);
        assert!(ck.find(&format!("optim.v.{}", p.name)).is_some());
        assert!(ck.find(&format!("optim.u.{}", p.name)).is_some());
        let entry = ck.find(&p.name).unwrap();
        let shape: Vec<u64> = p.tensor.shape().iter().map(|&d| d as u64).collect();
        assert_eq!(entry.shape, shape);
    }
}

#[test]
fn truncated_file_is_rejected() {
    let params = init_parameters::<f64>(&model(), 2).unwrap();
    let state = OptimizerState::new(&params);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    Checkpoint::from_state(&params, &state).save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
    assert!(Checkpoint::load(&path).is_err());
}
