// temporary timing probe
use rope_forge::corpus::Token;
use rope_forge::rope::RescaleFactors;
use rope_forge::tinyformer::{forward, init_model, ModelConfig};
use std::time::Instant;

#[test]
fn timing_probe() {
    let cfg = ModelConfig::desk_default();
    let ckpt = init_model(&cfg, 1).unwrap();
    for t_len in [128usize, 512, 1024, 4096] {
        let rf = RescaleFactors::identity(&cfg.rotary, t_len);
        let tokens: Vec<Token> = (0..t_len).map(|i| (i % 251) as Token).collect();
        let start = Instant::now();
        let reps = if t_len <= 512 { 5 } else { 2 };
        for _ in 0..reps {
            let _ = forward(&ckpt, &tokens, Some(&rf)).unwrap();
        }
        println!("forward T={t_len}: {:?}/call", start.elapsed() / reps);
    }
    let tokens: Vec<Token> = (0..128).map(|i| (i % 251) as Token).collect();
    let start = Instant::now();
    for _ in 0..5 {
        let _ = rope_forge::tinyformer::loss_and_grads(&ckpt, &tokens, None).unwrap();
    }
    println!("loss_and_grads T=128: {:?}/call", start.elapsed() / 5);
}
