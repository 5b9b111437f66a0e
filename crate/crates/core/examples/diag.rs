//! Scratch diagnostic: per-family greedy accuracy and answer distribution.

use salign_core::data::{read_dataset, split_samples, vocab};
use salign_core::model::{generate, load_checkpoint};
use salign_core::reward::{accuracy_reward, normalize_answer};
use std::collections::BTreeMap;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let data = std::path::Path::new(&args[1]);
    let ckpt = std::path::Path::new(&args[2]);
    let n: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(200);

    let params = load_checkpoint(ckpt).unwrap();
    let (manifest, samples) = read_dataset(data).unwrap();
    let (_, test) = split_samples(&manifest, &samples);
    let cfg = &params.config;

    let mut per_family: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut answer_hist: BTreeMap<String, usize> = BTreeMap::new();
    let mut gold_hist: BTreeMap<String, usize> = BTreeMap::new();
    for s in test.iter().take(n) {
        let family = if s.question[0] == vocab::template_token("count") {
            "count"
        } else if s.question[1] == vocab::template_token("color") {
            "color_of"
        } else {
            "shape_at"
        };
        let out = generate(&params, &s.image, &s.prompt_sequence(cfg), 0.0, 16, 0).unwrap();
        let correct = accuracy_reward(&out.answer_tokens(), &s.gold).unwrap();
        let e = per_family.entry(family).or_insert((0, 0));
        e.0 += correct as usize;
        e.1 += 1;
        let ans = normalize_answer(&out.answer_tokens());
        let names = vocab::names(cfg.vocab);
        answer_hist
            .entry(vocab::decode(&ans, &names))
            .and_modify(|c| *c += 1)
            .or_insert(1);
        gold_hist
            .entry(vocab::decode(&s.gold, &names))
            .and_modify(|c| *c += 1)
            .or_insert(1);
    }
    for (fam, (c, t)) in &per_family {
        println!("{}: {}/{} = {:.3}", fam, c, t, *c as f64 / *t as f64);
    }
    println!("top predicted: {:?}", {
        let mut v: Vec<_> = answer_hist.iter().collect();
        v.sort_by_key(|(_, c)| std::cmp::Reverse(**c));
        v.into_iter().take(8).collect::<Vec<_>>()
    });
    println!("top gold: {:?}", {
        let mut v: Vec<_> = gold_hist.iter().collect();
        v.sort_by_key(|(_, c)| std::cmp::Reverse(**c));
        v.into_iter().take(8).collect::<Vec<_>>()
    });
}
