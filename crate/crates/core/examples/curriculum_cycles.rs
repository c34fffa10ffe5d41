//! Three evaluate / filter / RL / RFT cycles over a mixed pool.
//!
//!     cargo run --release --example curriculum_cycles

use embodied_rl::curriculum::{Curriculum, CurriculumConfig};
use embodied_rl::grpo::GrpoConfig;
use embodied_rl::numerics::RngStream;
use embodied_rl::policy::{format_warmup, generate_pool, ToyPolicy};
use embodied_rl::rewards::{MockJudge, RewardSpec};
use embodied_rl::task::TaskKind;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = 1;
    let mut rng = RngStream::new(seed, 0);
    let kinds = [TaskKind::Mcq, TaskKind::Binary, TaskKind::Count, TaskKind::Ordering];
    let pool = generate_pool(&kinds, 128, &mut rng);
    let mut policy = ToyPolicy::new(32, &mut rng);
    format_warmup(&mut policy, &pool, 3000, 0.05, &mut rng.split(1))?;

    let grpo = GrpoConfig {
        epochs: 2,
        ..GrpoConfig::default()
    };
    let config = CurriculumConfig {
        stage_size: 64,
        ..CurriculumConfig::default()
    };
    let mut cur = Curriculum::new(policy, grpo, config, seed)?;
    for _ in 0..3 {
        let r = cur.run_cycle(&pool, &RewardSpec::default(), &MockJudge::default())?;
        let m = &r.metrics;
        println!(
            "cycle {}: frontier {:3}  stage {:?}  reward {:.3} -> {:.3} (rl) -> {:.3} (rft), {} traces",
            m.cycle, m.frontier_size, m.stage_by_dimension, m.mean_reward_before, m.mean_reward_after_rl,
            m.mean_reward_after_rft, m.rft_traces
        );
    }
    Ok(())
}
