//! Synthetic tasks, the toy policy's output grammar, and checkpoint round-trips.
//!
//!     cargo run --release --example policy_sampling

use embodied_rl::numerics::{RngStream, SamplingParams};
use embodied_rl::policy::{format_warmup, generate_pool, parse_output, rollout, ToyPolicy, Vocabulary};
use embodied_rl::task::TaskKind;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = RngStream::new(3, 0);
    let pool = generate_pool(&[TaskKind::Mcq, TaskKind::Box, TaskKind::Trajectory], 48, &mut rng);
    let vocab = Vocabulary::standard();
    let mut policy = ToyPolicy::new(32, &mut rng);
    format_warmup(&mut policy, &pool, 3000, 0.05, &mut rng.split(1))?;

    for task in pool.iter().take(3) {
        println!("prompt : {}", vocab.decode(&task.prompt_tokens));
        println!("target : {:?}", task.target);
        let r = rollout(&policy, task, &SamplingParams::default(), 64, &mut rng)?;
        println!("sample : {}", vocab.decode(&r.tokens));
        println!("parsed : {:?}\n", parse_output(&r.tokens, task.kind));
    }

    let bytes = policy.to_bytes();
    let restored = ToyPolicy::from_bytes(&bytes)?;
    println!("checkpoint {} bytes, fingerprint {:016x} == {:016x}", bytes.len(), policy.fingerprint(), restored.fingerprint());
    Ok(())
}
