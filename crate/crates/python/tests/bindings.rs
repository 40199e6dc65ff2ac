use intensivenet_py::{ctc_bruteforce, ctc_loss, ctc_oracle, greedy_decode, preset};

#[test]
fn ctc_functions_agree() {
    let probs = vec![
        vec![0.6, 0.3, 0.1],
        vec![0.2, 0.5, 0.3],
        vec![0.5, 0.1, 0.4],
    ];
    let (loss, grad) = ctc_loss(probs.clone(), vec![2, 1]).unwrap();
    assert!((loss - ctc_bruteforce(probs, vec![2, 1]).unwrap()).abs() < 1e-12);
    assert_eq!(grad.len(), 3);
    assert_eq!(
        greedy_decode(vec![vec![0.1, 0.9], vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap(),
        vec![1, 1]
    );
}

#[test]
fn oracle_and_presets() {
    let (cases, worst, pass) = ctc_oracle(4, 2).unwrap();
    assert!(pass && cases > 0 && worst < 1e-10);
    let cfg: serde_json::Value = serde_json::from_str(&preset("digitlines").unwrap()).unwrap();
    assert_eq!(cfg["train"]["batch_size"], 32);
}
