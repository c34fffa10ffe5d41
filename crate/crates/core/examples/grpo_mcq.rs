//! GRPO on the synthetic multiple-choice pool, from a format-warmed policy.
//!
//!     cargo run --release --example grpo_mcq -- [steps] [seed]

use embodied_rl::grpo::{GrpoConfig, RlTrainer};
use embodied_rl::numerics::RngStream;
use embodied_rl::policy::{format_warmup, generate_pool, ToyPolicy};
use embodied_rl::rewards::{MockJudge, RewardSpec};
use embodied_rl::task::TaskKind;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(Ok(300), |s| s.parse())?;
    let seed: u64 = args.next().map_or(Ok(1), |s| s.parse())?;

    let mut rng = RngStream::new(seed, 0);
    let pool = generate_pool(&[TaskKind::Mcq], 256, &mut rng);
    let mut policy = ToyPolicy::new(32, &mut rng);
    format_warmup(&mut policy, &pool, 6000, 0.05, &mut rng.split(1))?;

    let config = GrpoConfig {
        max_steps: Some(steps),
        ..GrpoConfig::default()
    };
    let mut trainer = RlTrainer::new(policy, config, seed)?;
    let mut window = Vec::new();
    trainer.run(&pool, &RewardSpec::default(), &MockJudge::default(), |_, m| {
        window.push(m.mean_reward);
        if m.step % 25 == 0 {
            let tail = &window[window.len().saturating_sub(10)..];
            println!(
                "step {:4}  reward {:.3}  (last 10: {:.3})  masked {:.2}  clip {:.3}",
                m.step,
                m.mean_reward,
                tail.iter().sum::<f64>() / tail.len() as f64,
                m.masked_fraction,
                m.clip_rate
            );
        }
        Ok(())
    })?;
    Ok(())
}
