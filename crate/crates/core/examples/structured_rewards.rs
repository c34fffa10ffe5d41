//! Scores a few hand-made predictions with every reward family.
//!
//!     cargo run --example structured_rewards

use embodied_rl::rewards::{
    discrete_frechet, dtw_distance, hungarian_matched_iou, iou, point_reward, trajectory_reward, Box2D, MockJudge,
    Point, RewardSpec, Trajectory,
};
use embodied_rl::policy::parse_text;
use embodied_rl::rewards::dispatch_reward;
use embodied_rl::task::{Answer, Dimension, TaskInstance, TaskKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = RewardSpec::default();
    let a = Box2D::new(0.1, 0.1, 0.5, 0.5)?;
    let b = Box2D::new(0.3, 0.3, 0.7, 0.7)?;
    println!("IoU of overlapping boxes: {:.4}", iou(&a, &b));

    // Two predictions against two ground-truth boxes, given in the "wrong" order.
    let gts = [a, b];
    let preds = [Box2D::new(0.3, 0.3, 0.7, 0.6)?, Box2D::new(0.1, 0.1, 0.5, 0.5)?];
    println!("matched IoU of a swapped pair: {:.4}", hungarian_matched_iou(&preds, &gts));

    let p = Point::new(0.2, 0.3);
    println!("point reward at distance 0.1: {:.4}", point_reward(&p, &Point::new(0.3, 0.3))?);

    let gt = Trajectory::new(vec![Point::new(0.0, 0.0), Point::new(0.5, 0.0), Point::new(1.0, 0.0)])?;
    let pred = Trajectory::new(vec![Point::new(0.0, 0.1), Point::new(0.5, 0.1), Point::new(1.0, 0.1)])?;
    println!(
        "shifted trajectory: DFD {:.3}, DTW {:.3}, reward {:.4}",
        discrete_frechet(&pred, &gt),
        dtw_distance(&pred, &gt),
        trajectory_reward(&pred, &gt, &spec)?
    );

    // Raw model text goes through the kind's grammar before it is scored.
    let task = TaskInstance {
        id: 0,
        kind: TaskKind::Mcq,
        dimension: Dimension::Perception,
        prompt_tokens: vec![0],
        target: Answer::Mcq('C'),
    };
    for text in ["C", "B", "not an answer"] {
        let parsed = parse_text(TaskKind::Mcq, text).ok();
        let r = dispatch_reward(&task, parsed.as_ref(), &spec, &MockJudge::default())?;
        println!("mcq {text:?} -> {r}");
    }
    Ok(())
}
