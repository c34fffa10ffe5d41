//! On-policy distillation against the offline baseline, same teacher and student init.
//!
//!     cargo run --release --example distill_compare

use embodied_rl::distill::{compare_methods, supervised_teacher, OpdConfig, TeacherStudentPair};
use embodied_rl::numerics::RngStream;
use embodied_rl::policy::{generate_pool, ToyPolicy};
use embodied_rl::rewards::{MockJudge, RewardSpec};
use embodied_rl::task::TaskKind;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = 1;
    let kinds = [TaskKind::Mcq, TaskKind::Box];
    let mut rng = RngStream::new(seed, 0);
    let pool = generate_pool(&kinds, 256, &mut rng);
    let heldout = generate_pool(&kinds, 64, &mut RngStream::new(seed, 1));

    let teacher = supervised_teacher(&pool, 32, 8000, 0.05, &mut rng)?;
    let student = ToyPolicy::new(16, &mut rng);
    let pair = TeacherStudentPair::new(teacher, student)?;
    let config = OpdConfig {
        steps: 600,
        eval_every: 100,
        ..OpdConfig::default()
    };
    let c = compare_methods(&pair, &pool, &heldout, &config, &RewardSpec::default(), &MockJudge::default(), seed)?;
    println!("{:>5}  {:>10} {:>8}  {:>10} {:>8}", "step", "on-pol KL", "reward", "offline KL", "reward");
    for (a, b) in c.on_policy.iter().zip(&c.offline) {
        println!(
            "{:5}  {:10.4} {:8.3}  {:10.4} {:8.3}",
            a.step, a.heldout_kl, a.student_reward, b.heldout_kl, b.student_reward
        );
    }
    Ok(())
}
