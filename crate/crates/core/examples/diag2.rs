//! Conditional structure of sampled rollouts from a checkpoint.
use salign_core::data::{read_dataset, split_samples, vocab};
use salign_core::model::{generate_with_logprobs, load_checkpoint, Segment, special};
use salign_core::reward::{accuracy_reward, format_reward};
use salign_core::data::derive_seed;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let data = std::path::Path::new(&args[1]);
    let ckpt = std::path::Path::new(&args[2]);
    let temp: f64 = args[3].parse().unwrap();
    let params = load_checkpoint(ckpt).unwrap();
    let (manifest, samples) = read_dataset(data).unwrap();
    let (_, test) = split_samples(&manifest, &samples);
    let cfg = &params.config;

    let (mut n, mut fmt_ok, mut acc_ok) = (0, 0, 0);
    let (mut think_right, mut acc_given_think, mut acc_given_wrong_think) = (0, 0, 0);
    let mut wrong_think = 0;
    for s in test.iter().take(120) {
        // the true cells come from the warmup script (tokens between 'look' and close)
        let script = &s.warmup_response;
        let close_at = script.iter().position(|t| *t == special::THINK_CLOSE).unwrap();
        let true_cells: Vec<usize> = script[2..close_at].to_vec();
        for g in 0..4u64 {
            let (seq, _) = generate_with_logprobs(&params, &s.image, &s.prompt_sequence(cfg), temp, 16, derive_seed(7, s.id * 31 + g)).unwrap();
            n += 1;
            let f = format_reward(&seq);
            fmt_ok += f as usize;
            let acc = accuracy_reward(&seq.answer_tokens(), &s.gold).unwrap() as usize;
            acc_ok += acc;
            if f == 1.0 {
                let think: Vec<usize> = seq.response_positions().iter().map(|&p| seq.token(p))
                    .filter(|t| (vocab::ROW_BASE..vocab::TEMPLATE_BASE).contains(t)).collect();
                let tr = think == true_cells;
                if tr { think_right += 1; acc_given_think += acc; } else { wrong_think += 1; acc_given_wrong_think += acc; }
            }
        }
    }
    println!("n={} P(fmt)={:.3} P(acc)={:.3}", n, fmt_ok as f64 / n as f64, acc_ok as f64 / n as f64);
    println!("P(think coords exactly right | fmt)={:.3}", think_right as f64 / fmt_ok.max(1) as f64);
    println!("P(acc | think right)={:.3}  P(acc | think wrong)={:.3}", acc_given_think as f64 / think_right.max(1) as f64, acc_given_wrong_think as f64 / wrong_think.max(1) as f64);
}
